"""Scalar projections of forecast-observation pairs.

All functions act on the last axis of ``y`` and broadcast over leading axes.
Apart from ``pca`` (whose direction is always computed from sample values)
and hard ``copula``, they accept autodiff Vars and stay differentiable.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .numerics import TooFewSamples, sample_covariance, sym_eigen


class PreRankError(ValueError):
    pass


class IndexOutOfRange(PreRankError):
    pass


class DegenerateVector(PreRankError):
    pass


class DensityUnavailable(PreRankError):
    pass


class NoSamples(PreRankError):
    pass


class DegenerateSpectrumWarning(RuntimeWarning):
    pass


@dataclass
class PreRankContext:
    """What a pre-rank may need beyond ``y`` itself.

    ``samples`` is a reference draw from the predictive distribution, shaped
    (S, D) for one case or (N, S, D) for N cases. ``log_density`` maps points
    shaped like ``(N, P, D)`` (or ``(P, D)``) to log densities.
    """

    log_density: Callable | None = None
    samples: object = None
    tau_cop: float = 100.0


def marginal(y, d: int):
    dim = ad.value(y).shape[-1]
    if not 1 <= d <= dim:
        raise IndexOutOfRange(f"marginal index {d} outside [1, {dim}]")
    return ad.getitem(y, (Ellipsis, d - 1))


def location(y):
    return ad.mean(y, axis=-1)


def scale(y):
    centred = ad.sub(y, ad.mean(y, axis=-1, keepdims=True))
    return ad.mean(ad.mul(centred, centred), axis=-1)


def dependency(y, h: int = 1):
    """Negative lag-``h`` variogram over the coordinate variance."""
    dim = ad.value(y).shape[-1]
    if dim < 2 or not 1 <= h <= dim - 1:
        raise IndexOutOfRange(f"lag {h} invalid for dimension {dim}")
    s2 = scale(y)
    if np.any(ad.value(s2) <= 1e-12):
        raise DegenerateVector("coordinates have (near) zero variance")
    diff = ad.sub(ad.getitem(y, (Ellipsis, slice(0, dim - h))), ad.getitem(y, (Ellipsis, slice(h, dim))))
    gamma = ad.div(ad.sum_(ad.mul(diff, diff), axis=-1), 2.0 * (dim - h))
    return -ad.div(gamma, s2)


def hdr(y, ctx: PreRankContext):
    """Predictive density at ``y``."""
    if ctx is None or ctx.log_density is None:
        raise DensityUnavailable("hdr pre-rank needs a predictive density")
    return ad.exp(ctx.log_density(y))


def _with_case_axis(y, samples):
    """Reshape to (N, P, D) points against (N, S, D) reference samples."""
    sv = ad.value(samples)
    yv = ad.value(y)
    if sv.ndim == 2:
        samples = ad.reshape(samples, (1,) + sv.shape)
        y = ad.reshape(y, (1,) + yv.shape)
        yv = ad.value(y)
        sv = ad.value(samples)
    n, s, d = sv.shape
    out_shape = yv.shape[:-1]
    if yv.shape[0] != n:
        raise PreRankError(f"points have {yv.shape[0]} cases, reference samples {n}")
    return ad.reshape(y, (n, -1, d)), samples, out_shape


def copula(y, ctx: PreRankContext, mode: str = "hard"):
    """Joint predictive CDF at ``y`` estimated from reference samples."""
    if ctx is None or ctx.samples is None or ad.value(ctx.samples).shape[-2] < 1:
        raise NoSamples("copula pre-rank needs at least one reference sample")
    single = ad.value(ctx.samples).ndim == 2
    y3, ref, out_shape = _with_case_axis(y, ctx.samples)
    n = ad.value(ref).shape[0]
    if single:
        out_shape = out_shape[1:]
    if mode == "hard":
        yv, rv = ad.value(y3), ad.value(ref)
        below = np.all(rv[:, None, :, :] <= yv[:, :, None, :], axis=-1)
        return below.mean(axis=-1).reshape(out_shape)
    if mode != "smooth":
        raise PreRankError(f"unknown copula mode {mode!r}")
    tau = float(ctx.tau_cop)
    if tau <= 0:
        raise PreRankError("tau_cop must be positive")
    d = ad.value(ref).shape[-1]
    s = ad.value(ref).shape[1]
    yy = ad.reshape(y3, (n, -1, 1, d))
    rr = ad.reshape(ref, (n, 1, s, d))
    # prod_d sigmoid(z_d) = exp(-sum_d softplus(-z_d))
    z = ad.mul(ad.sub(yy, rr), tau)
    logp = -ad.sum_(ad.softplus(-z), axis=-1)
    return ad.reshape(ad.mean(ad.exp(logp), axis=-1), out_shape)


def pca_direction(samples, k: int = 1):
    """k-th principal direction of the sample covariance, with a degeneracy flag.

    ``samples`` is (M, D) or (N, M, D). Returns ``(v, degenerate)`` where ``v``
    has shape (D,) or (N, D).
    """
    sv = np.asarray(ad.value(samples), dtype=float)
    m, d = sv.shape[-2:]
    if m < 2:
        raise TooFewSamples(f"PCA pre-rank needs at least 2 samples, got {m}")
    if not 1 <= k <= min(d, m - 1):
        raise IndexOutOfRange(f"component {k} outside [1, {min(d, m - 1)}]")
    eig = sym_eigen(sample_covariance(sv))
    v = eig.vectors[..., :, k - 1]
    if k < d:
        degenerate = eig.values[..., k - 1] - eig.values[..., k] < 1e-10
    else:
        degenerate = np.zeros(eig.values.shape[:-1], dtype=bool)
    return v, degenerate


def pca_prerank(y, samples, k: int = 1, direction=None):
    """Projection of ``y`` on the k-th principal direction of ``samples``.

    ``direction`` may be supplied (as returned by :func:`pca_direction`) to
    project several point sets on the same axis.
    """
    if direction is None:
        direction, degenerate = pca_direction(samples, k)
        if np.any(degenerate):
            warnings.warn(
                f"{int(np.sum(degenerate))} case(s) have a near-zero eigen-gap at k={k}",
                DegenerateSpectrumWarning,
                stacklevel=2,
            )
    v = np.asarray(direction)
    yv = ad.value(y)
    extra = yv.ndim - v.ndim
    v = v.reshape(v.shape[:-1] + (1,) * extra + v.shape[-1:])
    return ad.sum_(ad.mul(y, v), axis=-1)


# --------------------------------------------------------------- registry

_NAME_RE = re.compile(r"^(marg|loc|scale|dep|hdr|copula|pca)(?::(\w+))?$")


@dataclass(frozen=True)
class PreRank:
    """A named pre-rank. ``kind`` is one of marg, loc, scale, dep, hdr, copula, pca.

    ``param`` is the 1-based dimension (marg), lag (dep) or component (pca).
    ``marg`` without an index pools every coordinate.
    """

    kind: str
    param: int | None = None

    @classmethod
    def parse(cls, name: str) -> "PreRank":
        m = _NAME_RE.match(name.strip())
        if not m:
            raise PreRankError(f"unknown pre-rank {name!r}")
        kind, arg = m.groups()
        if kind in ("loc", "scale", "hdr", "copula"):
            if arg is not None:
                raise PreRankError(f"pre-rank {kind} takes no parameter")
            return cls(kind)
        if arg is None:
            if kind == "marg":
                return cls("marg")
            return cls(kind, 1)
        if not arg.isdigit():
            raise PreRankError(f"bad parameter in {name!r}")
        return cls(kind, int(arg))

    @property
    def name(self) -> str:
        return self.kind if self.param is None else f"{self.kind}:{self.param}"

    @property
    def differentiable(self) -> bool:
        return self.kind != "pca"

    @property
    def needs_samples(self) -> bool:
        return self.kind in ("pca", "copula")

    def n_outputs(self, dim: int) -> int:
        return dim if self.kind == "marg" and self.param is None else 1

    def apply(self, y, ctx: PreRankContext | None = None, direction=None, copula_mode: str = "hard"):
        """Pre-rank values with a trailing component axis: ``y.shape[:-1] + (C,)``.

        ``C`` is D for the pooled marginal and 1 otherwise. Points ``y`` are
        (N, D) or (N, P, D) against case-wise context of length N.
        """
        yv = ad.value(y)
        k = self.kind
        if k == "marg":
            if self.param is None:
                return y
            out = marginal(y, self.param)
        elif k == "loc":
            out = location(y)
        elif k == "scale":
            out = scale(y)
        elif k == "dep":
            out = dependency(y, self.param)
        elif k == "hdr":
            out = hdr(y, ctx)
        elif k == "copula":
            out = copula(y, ctx, mode=copula_mode)
        elif k == "pca":
            if direction is None:
                if ctx is None or ctx.samples is None:
                    raise NoSamples("PCA pre-rank needs reference samples")
                direction, _ = pca_direction(ctx.samples, self.param)
            out = pca_prerank(y, None, self.param, direction=direction)
        else:  # pragma: no cover
            raise PreRankError(k)
        return ad.reshape(out, yv.shape[:-1] + (1,))
