"""PIT-based calibration diagnostics.

Projected PITs, the probabilistic calibration error (PCE) and its sigmoid
smoothed surrogate, the energy score, reliability curves and the Monte-Carlo
null distribution of the PCE under perfect calibration.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import RngStream, as_generator
from .preranks import PreRank, PreRankContext, pca_direction

NULL_BLOCK = 1000


class EmptySampleSet(ValueError):
    pass


@dataclass(frozen=True)
class QuantileGrid:
    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float).ravel()
        if lv.size == 0 or np.any(np.diff(lv) <= 0) or lv[0] < 0 or lv[-1] > 1:
            raise ValueError("quantile levels must be strictly increasing within [0, 1]")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def uniform(cls, m: int = 100) -> "QuantileGrid":
        return cls(np.arange(1, m + 1) / (m + 1))

    def __len__(self):
        return self.levels.size


def _grid(grid) -> np.ndarray:
    if grid is None:
        return QuantileGrid.uniform().levels
    if isinstance(grid, QuantileGrid):
        return grid.levels
    return QuantileGrid(grid).levels


# ---------------------------------------------------------------- PITs

def projected_pit(t_obs, t_samples, mode: str = "hard", tau: float = 100.0, rng=None):
    """PIT of ``t_obs`` among ``t_samples`` (samples on the last axis).

    hard: fraction of samples <= t_obs. smooth: mean sigmoid(tau (t - T)).
    randomized: (#{T < t} + V (1 + #{T = t})) / (M + 1) with V ~ U(0, 1).
    """
    sv = ad.value(t_samples)
    if sv.shape[-1] < 1:
        raise EmptySampleSet("projected PIT needs at least one sample")
    m = sv.shape[-1]
    if mode == "smooth":
        t = ad.reshape(t_obs, ad.value(t_obs).shape + (1,))
        return ad.mean(ad.sigmoid(ad.mul(ad.sub(t, t_samples), float(tau))), axis=-1)
    tv = np.asarray(ad.value(t_obs))[..., None]
    if mode == "hard":
        return np.sum(sv <= tv, axis=-1) / m
    if mode == "randomized":
        below = np.sum(sv < tv, axis=-1)
        ties = np.sum(sv == tv, axis=-1)
        v = as_generator(rng).random(below.shape)
        return (below + v * (1 + ties)) / (m + 1)
    raise ValueError(f"unknown PIT mode {mode!r}")


def prerank_pits(prerank: PreRank, y, ensemble, ctx: PreRankContext | None = None,
                 mode: str = "hard", tau: float = 100.0, rng=None, copula_mode: str = "hard",
                 direction=None):
    """Projected PITs for cases ``y`` (N, D) against ensembles (N, M, D).

    For pca the direction is ``direction`` if given (shape (D,) or (N, D)),
    else estimated from ``ctx.samples``, a draw independent of ``ensemble``.
    It is shared by the observation and every member. Returns (N, C) PITs;
    C is D for the pooled marginal and 1 otherwise.
    """
    if prerank.kind == "pca" and direction is None:
        if ctx is None or ctx.samples is None:
            raise ValueError("pca pre-rank needs reference samples in the context")
        direction, _ = pca_direction(ctx.samples, prerank.param)
    t_obs = prerank.apply(y, ctx, direction=direction, copula_mode=copula_mode)          # (N, C)
    t_ens = prerank.apply(ensemble, ctx, direction=direction, copula_mode=copula_mode)   # (N, M, C)
    t_ens = ad.swapaxes(t_ens, -1, -2)                                                 # (N, C, M)
    return projected_pit(t_obs, t_ens, mode=mode, tau=tau, rng=rng)


# ---------------------------------------------------------------- PCE

def empirical_cdf(pits, alpha):
    z = np.sort(np.asarray(pits, dtype=float).ravel())
    if z.size == 0:
        raise EmptySampleSet("empty PIT sample")
    return np.searchsorted(z, np.asarray(alpha, dtype=float), side="right") / z.size


def pce(pits, grid=None) -> float:
    """Mean over the grid of |alpha - empirical CDF(alpha)|."""
    a = _grid(grid)
    return float(np.mean(np.abs(a - empirical_cdf(pits, a))))


def smoothed_cdf(pits, alpha, tau: float = 100.0):
    """(1/N) sum_i sigmoid(tau (alpha - Z_i)); differentiable in the PITs."""
    z = ad.reshape(pits, (1, -1))
    a = np.asarray(alpha, dtype=float)
    scalar = a.ndim == 0
    a = a.reshape(-1, 1)
    out = ad.mean(ad.sigmoid(ad.mul(ad.sub(a, z), float(tau))), axis=-1)
    return ad.getitem(out, 0) if scalar else out


def pce_kde(pits, grid=None, tau: float = 100.0, p: float = 1.0):
    """Mean over the grid of |alpha - smoothed CDF(alpha)|^p."""
    if p < 1:
        raise ValueError("penalty exponent p must be >= 1")
    if ad.value(pits).size == 0:
        raise EmptySampleSet("empty PIT sample")
    a = _grid(grid)
    gap = ad.abs_(ad.sub(a, smoothed_cdf(pits, a, tau)))
    if p != 1:
        gap = ad.power(gap, p)
    return ad.mean(gap)


def reliability_curve(pits, grid=None):
    a = _grid(grid)
    return [(float(x), float(f)) for x, f in zip(a, empirical_cdf(pits, a))]


# ---------------------------------------------------------------- scores

def energy_score(y, samples, chunk_elems: int = 4_000_000):
    """Empirical energy score; ``y`` (..., D), ``samples`` (..., G, D)."""
    y = np.asarray(y, dtype=float)
    s = np.asarray(samples, dtype=float)
    g, d = s.shape[-2:]
    if g < 1:
        raise EmptySampleSet("energy score needs at least one sample")
    batch = s.shape[:-2]
    s2 = s.reshape((-1, g, d))
    y2 = np.broadcast_to(y, batch + (d,)).reshape((-1, d))
    out = np.empty(s2.shape[0])
    step = max(1, chunk_elems // max(1, g * g * d))
    for i in range(0, s2.shape[0], step):
        ss, yy = s2[i:i + step], y2[i:i + step]
        term1 = np.linalg.norm(ss - yy[:, None, :], axis=-1).mean(axis=-1)
        pair = np.linalg.norm(ss[:, :, None, :] - ss[:, None, :, :], axis=-1)
        out[i:i + step] = term1 - pair.sum(axis=(-2, -1)) / (2.0 * g * g)
    out = out.reshape(batch)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- null

@dataclass
class NullDistribution:
    statistics: np.ndarray
    n: int
    grid: np.ndarray
    discretization: int | None = None

    def quantile(self, q):
        return np.quantile(self.statistics, q)

    @property
    def replicates(self) -> int:
        return self.statistics.size


def _null_block(args):
    seed, stream_id, count, n, levels, disc = args
    gen = RngStream(seed, stream_id).generator()
    if disc is None:
        cells = np.diff(np.concatenate(([0.0], levels, [1.0])))
        counts = gen.multinomial(n, cells, size=count)
        cdf = np.cumsum(counts[:, :-1], axis=1) / n
    else:
        support = np.arange(disc + 1) / disc
        counts = gen.multinomial(n, np.full(disc + 1, 1.0 / (disc + 1)), size=count)
        cum = np.cumsum(counts, axis=1) / n
        pos = np.searchsorted(support, levels, side="right") - 1
        cdf = np.where(pos >= 0, cum[:, np.maximum(pos, 0)], 0.0)
    return np.mean(np.abs(levels - cdf), axis=1)


def null_distribution(n: int, grid=None, b: int = 50_000, discretization: int | None = None,
                      rng=0, workers: int = 1) -> NullDistribution:
    """Monte-Carlo law of the PCE of ``n`` perfectly calibrated PITs.

    Each replicate is summarised by its counts per grid cell (multinomial),
    which determine the PCE exactly. Replicates are generated in blocks of
    fixed size with one random stream per block, so the result does not
    depend on ``workers``.
    """
    if n < 1 or b < 1:
        raise ValueError("need n >= 1 and b >= 1")
    levels = _grid(grid)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    jobs = []
    for blk, start in enumerate(range(0, b, NULL_BLOCK)):
        sid = stream.stream_id + (blk,)
        jobs.append((stream.seed, sid, min(NULL_BLOCK, b - start), int(n), levels, discretization))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_null_block, jobs))
    else:
        parts = [_null_block(j) for j in jobs]
    stats = np.sort(np.concatenate(parts))
    return NullDistribution(stats, int(n), levels, discretization)


# ---------------------------------------------------------------- reports

@dataclass
class PreRankReport:
    prerank: str
    pce: float
    null_q95: float
    null_q99: float
    reliability: list
    pits: np.ndarray = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.pce <= self.null_q95

    def to_dict(self, nll=None, es=None) -> dict:
        return {
            "prerank": self.prerank,
            "pce": self.pce,
            "null_q95": float(self.null_q95),
            "null_q99": float(self.null_q99),
            "pass": bool(self.passed),
            "reliability": [[a, f] for a, f in self.reliability],
            "nll": nll,
            "energy_score": es,
        }


@dataclass
class CalibrationReport:
    entries: list
    nll: float | None = None
    energy_score: float | None = None

    def to_json_obj(self) -> list:
        return [e.to_dict(self.nll, self.energy_score) for e in self.entries]

    def __getitem__(self, name) -> PreRankReport:
        for e in self.entries:
            if e.prerank == name:
                return e
        raise KeyError(name)


def build_report(pits_by_prerank: dict, n_cases: int, grid=None, discretization=None,
                 b: int = 5000, rng=0, workers: int = 1, nll=None, es=None,
                 null: NullDistribution | None = None) -> CalibrationReport:
    """PCE with null gates for every pre-rank; one null law shared by all."""
    levels = _grid(grid)
    if null is None:
        null = null_distribution(n_cases, levels, b, discretization, rng=rng, workers=workers)
    q95, q99 = null.quantile([0.95, 0.99])
    entries = []
    for name, z in pits_by_prerank.items():
        z = np.asarray(z, dtype=float).ravel()
        entries.append(PreRankReport(name, pce(z, levels), float(q95), float(q99), reliability_curve(z, levels), z))
    return CalibrationReport(entries, nll, es)
