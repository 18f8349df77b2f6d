"""Dataset ingestion, splitting and standardization, plus synthetic regression data."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream
from .training import Split


class DataError(ValueError):
    pass


class EmptyFile(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    def __init__(self, row: int, col: str, text: str):
        super().__init__(f"non-numeric value {text!r} at line {row}, column {col!r}")
        self.row = row
        self.col = col


class ConstantColumnWarning(UserWarning):
    pass


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, a: np.ndarray, names=None) -> "Standardizer":
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        flat = std <= 1e-12
        if np.any(flat):
            cols = [names[i] if names else str(i) for i in np.flatnonzero(flat)]
            warnings.warn(f"constant column(s) {cols}: std clamped to 1", ConstantColumnWarning, stacklevel=3)
            std = np.where(flat, 1.0, std)
        return cls(mean, std)

    def apply(self, a):
        return (np.asarray(a, dtype=float) - self.mean) / self.std

    def invert(self, a):
        return np.asarray(a, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    feature_names: list
    target_names: list
    splits: dict  # name -> index array into the raw rows
    x_scaler: Standardizer
    y_scaler: Standardizer

    def split(self, name: str) -> Split:
        idx = self.splits[name]
        return Split(self.x_scaler.apply(self.x[idx]), self.y_scaler.apply(self.y[idx]))

    @property
    def train(self) -> Split:
        return self.split("train")

    @property
    def val(self) -> Split:
        return self.split("val")

    @property
    def test(self) -> Split:
        return self.split("test")


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    fr = np.asarray(fractions, dtype=float)
    if fr.size != 3 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError("split fractions must be three nonnegative numbers summing to 1")
    perm = RngStream(seed, (0,)).generator().permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    n_val = min(n_val, n - n_train)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def from_arrays(x, y, feature_names=None, target_names=None, fractions=(0.8, 0.1, 0.1), seed=0) -> Dataset:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] < 10:
        raise DataError(f"need at least 10 rows, got {x.shape[0]}")
    feature_names = feature_names or [f"x{i}" for i in range(x.shape[1])]
    target_names = target_names or [f"y{i}" for i in range(y.shape[1])]
    splits = split_indices(x.shape[0], fractions, seed)
    tr = splits["train"]
    if tr.size < 2:
        raise DataError("training split is too small")
    return Dataset(x, y, list(feature_names), list(target_names), splits,
                   Standardizer.fit(x[tr], feature_names), Standardizer.fit(y[tr], target_names))


def load_dataset(path, target_cols, fractions=(0.8, 0.1, 0.1), seed: int = 0, feature_cols=None) -> Dataset:
    """Read a headed CSV; every non-target column is a feature unless ``feature_cols`` is given."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not any(header):
            raise EmptyFile(f"{path}: line 1 has no header")
        rows = [(i, r) for i, r in enumerate(reader, start=2) if any(c.strip() for c in r)]
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    # a numeric first line means the header is missing
    try:
        [float(h) for h in header]
    except ValueError:
        pass
    else:
        raise EmptyFile(f"{path}: line 1 looks like data, expected a header")
    target_cols = list(target_cols)
    for c in target_cols:
        if c not in header:
            raise MissingColumn(f"target column {c!r} not in header")
    if feature_cols is None:
        feature_cols = [h for h in header if h not in target_cols]
    for c in feature_cols:
        if c not in header:
            raise MissingColumn(f"feature column {c!r} not in header")
    table = np.empty((len(rows), len(header)))
    for k, (line, r) in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields, got {len(r)}")
        for j, cell in enumerate(r):
            try:
                table[k, j] = float(cell)
            except ValueError:
                raise NonNumericCell(line, header[j], cell) from None
            if not np.isfinite(table[k, j]):
                raise NonNumericCell(line, header[j], cell)
    col = {h: j for j, h in enumerate(header)}
    x = table[:, [col[c] for c in feature_cols]]
    y = table[:, [col[c] for c in target_cols]]
    return from_arrays(x, y, feature_cols, target_cols, fractions, seed)


def correlated_noise_regression(n: int, seed: int = 0, dim: int = 3, max_corr: float = 0.9):
    """Inputs x ~ U(-1, 1)^2; targets with mean f(x) and input-dependent correlated noise.

    The noise over the D coordinates is AR(1)-like with correlation
    r(x) = max_corr * (x1 + 1) / 2 and scale 0.3 + 0.2 |x2|.
    """
    gen = RngStream(seed, (7,)).generator()
    x = gen.uniform(-1.0, 1.0, (n, 2))
    idx = np.arange(dim)
    mean = np.sin(np.pi * x[:, :1] * (idx + 1) / dim) + x[:, 1:2] * np.cos(idx)
    r = max_corr * (x[:, 0] + 1.0) / 2.0
    sd = 0.3 + 0.2 * np.abs(x[:, 1])
    lag = np.abs(idx[:, None] - idx[None, :])
    cov = sd[:, None, None] ** 2 * r[:, None, None] ** lag
    chol = np.linalg.cholesky(cov)
    y = mean + np.einsum("nij,nj->ni", chol, gen.standard_normal((n, dim)))
    return x, y


def linear_gaussian(n: int, seed: int = 0, input_dim: int = 3, dim: int = 2, noise: float = 0.5):
    gen = RngStream(seed, (8,)).generator()
    x = gen.standard_normal((n, input_dim))
    w = RngStream(seed, (9,)).generator().standard_normal((input_dim, dim))
    y = x @ w + noise * gen.standard_normal((n, dim))
    return x, y
