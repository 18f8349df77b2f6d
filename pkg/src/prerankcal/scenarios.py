"""Gaussian simulation studies with controlled forecast misspecification.

The true law is N(0, Sigma) with an exponential covariance, either over a
1-D index set or over a rectangular spatial grid. A misspecified forecast
N(mu, Sigma') issues an M-member ensemble per case, and each pre-rank turns
(observation, ensemble) into a projected PIT.

Covariance range is called ``length`` throughout; sigmoid temperatures
elsewhere in the package are called ``tau``.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import prerank_pits
from .model import MixtureParams, log_density
from .numerics import RngStream, cholesky, sym_eigen
from .preranks import PreRank, PreRankContext

CASE_CHUNK = 500


class ScenarioError(ValueError):
    pass


class DimensionTooSmall(ScenarioError):
    pass


class IndexOverlap(ScenarioError):
    pass


@dataclass(frozen=True)
class ExpCovSpec:
    """Exponential covariance. ``kind`` is "index" (needs ``dim``) or "grid" (needs rows, cols)."""

    kind: str = "index"
    dim: int = 10
    rows: int = 5
    cols: int = 5
    sigma2: float = 1.0
    length: float = 1.0
    axis_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("index", "grid"):
            raise ScenarioError(f"unknown covariance kind {self.kind!r}")
        if self.sigma2 <= 0 or self.length <= 0:
            raise ScenarioError("sigma2 and length must be positive")
        if self.axis_scale <= 0:
            raise ScenarioError("axis_scale must be positive")

    @property
    def size(self) -> int:
        return self.dim if self.kind == "index" else self.rows * self.cols

    def locations(self) -> np.ndarray:
        if self.kind == "index":
            return np.arange(1, self.dim + 1, dtype=float)[:, None]
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        # row-major flattening; s = (x, y) = (column, row)
        return np.column_stack([c.ravel(), r.ravel()]).astype(float)

    def with_(self, **kw) -> "ExpCovSpec":
        d = self.__dict__.copy()
        d.update(kw)
        return ExpCovSpec(**d)


def build_cov(spec: ExpCovSpec) -> np.ndarray:
    s = spec.locations()
    if spec.kind == "grid":
        s = s * np.array([1.0, spec.axis_scale])
    dist = np.sqrt(np.sum((s[:, None, :] - s[None, :, :]) ** 2, axis=-1))
    cov = spec.sigma2 * np.exp(-dist / spec.length)
    np.fill_diagonal(cov, spec.sigma2)
    return cov


def _eig(sigma):
    e = sym_eigen(sigma)
    return e.values, e.vectors


def _assemble(u, lam):
    out = (u * lam) @ u.T
    return 0.5 * (out + out.T)


def spectrum_scramble(sigma, gamma: float) -> np.ndarray:
    """Interpolate the spectrum towards its reversal, keeping eigenvectors and trace."""
    if not 0.0 <= gamma <= 1.0:
        raise ScenarioError("gamma must lie in [0, 1]")
    lam, u = _eig(sigma)
    mixed = (1.0 - gamma) * lam + gamma * lam[::-1]
    mixed = mixed * (lam.sum() / mixed.sum())
    return _assemble(u, mixed)


def mean_direction_basis(d: int) -> np.ndarray:
    """Orthonormal basis whose first column is 1/sqrt(d).

    Completed by Gram-Schmidt over the standard basis in index order,
    skipping candidates that are (numerically) dependent.
    """
    cols = [np.full(d, 1.0 / np.sqrt(d))]
    for i in range(d):
        if len(cols) == d:
            break
        v = np.zeros(d)
        v[i] = 1.0
        for _ in range(2):
            for c in cols:
                v = v - np.dot(c, v) * c
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            cols.append(v / nv)
    return np.column_stack(cols)


def pca_structure(sigma, c: float, k: int) -> np.ndarray:
    """Distort the spectrum orthogonal to the mean direction.

    The top-k eigenvalues of the block orthogonal to 1/sqrt(D) are multiplied
    by ``c`` and the bottom-k divided by ``c``; the variance along the mean
    direction and its cross terms are untouched.
    """
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    if d < 3:
        raise DimensionTooSmall("pca_structure needs D >= 3")
    if c < 1:
        raise ScenarioError("c must be >= 1")
    if k < 1 or 2 * k > d - 1:
        raise IndexOverlap(f"k={k} overlaps amplified and shrunk sets for D={d}")
    v = mean_direction_basis(d)
    s = v.T @ sigma @ v
    s = 0.5 * (s + s.T)
    mu, w = _eig(s[1:, 1:])
    mu_t = mu.copy()
    mu_t[:k] *= c
    mu_t[-k:] /= c
    s_t = s.copy()
    s_t[1:, 1:] = _assemble(w, mu_t)
    out = v @ s_t @ v.T
    return 0.5 * (out + out.T)


def pc_anisotropy_flip(sigma, a: float, k: int, rotation: float = np.pi / 2) -> np.ndarray:
    """Reverse the spectrum, stretch its new top-k and shrink its bottom-k by ``a``,
    restore the trace, then rotate the first two principal axes by ``rotation``."""
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    if d < 2 or k < 1 or 2 * k > d:
        raise DimensionTooSmall(f"need D >= 2 and 1 <= k <= D/2, got D={d}, k={k}")
    if a < 1:
        raise ScenarioError("a must be >= 1")
    lam, u = _eig(sigma)
    new = lam[::-1].copy()
    new[:k] *= a
    new[d - k:] /= a
    new = new * (lam.sum() / new.sum())
    r = np.eye(d)
    cs, sn = np.cos(rotation), np.sin(rotation)
    r[0, 0], r[0, 1], r[1, 0], r[1, 1] = cs, -sn, sn, cs
    ur = u @ r
    return _assemble(ur, new)


@dataclass(frozen=True)
class MisspecSpec:
    """Forecast error. ``kind`` is one of none, mean_bias, variance_scale,
    range_change, spectrum_scramble, pca_structure, isotropy,
    pc_anisotropy_flip; ``params`` holds that kind's parameters."""

    kind: str = "none"
    params: dict = field(default_factory=dict)

    KINDS = ("none", "mean_bias", "variance_scale", "range_change", "spectrum_scramble",
             "pca_structure", "isotropy", "pc_anisotropy_flip")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ScenarioError(f"unknown misspecification {self.kind!r}")

    def predictive(self, true_spec: ExpCovSpec):
        """(mean, covariance) of the forecast law."""
        p = self.params
        d = true_spec.size
        sigma = build_cov(true_spec)
        mean = np.zeros(d)
        k = self.kind
        if k == "none":
            pass
        elif k == "mean_bias":
            mean = np.full(d, float(p.get("delta", 0.5)))
        elif k == "variance_scale":
            factor = p["factor"] if "factor" in p else 1.0 + float(p.get("delta", 0.75))
            if factor <= 0:
                raise ScenarioError("variance factor must be positive")
            sigma = sigma * float(factor)
        elif k == "range_change":
            sigma = build_cov(true_spec.with_(length=float(p.get("length", 0.3))))
        elif k == "spectrum_scramble":
            sigma = spectrum_scramble(sigma, float(p.get("gamma", 1.0)))
        elif k == "pca_structure":
            sigma = pca_structure(sigma, float(p.get("c", 2.0)), int(p.get("k", 2)))
        elif k == "isotropy":
            if true_spec.kind != "grid":
                raise ScenarioError("isotropy misspecification needs a spatial grid")
            sigma = build_cov(true_spec.with_(axis_scale=float(p.get("alpha", 5.0))))
        elif k == "pc_anisotropy_flip":
            sigma = pc_anisotropy_flip(sigma, float(p.get("a", 2.0)), int(p.get("k", 3)),
                                       float(p.get("rotation", np.pi / 2)))
        return mean, sigma


@dataclass
class SimulationRun:
    n_cases: int
    ensemble_size: int
    true_spec: ExpCovSpec
    misspec: MisspecSpec
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    pits: dict  # pre-rank name -> (N, C) array

    @property
    def total_draws(self) -> int:
        return self.n_cases * (self.ensemble_size + 1)


def _gaussian_logpdf(mean, chol):
    params = MixtureParams(np.zeros(1), mean[None, :], chol[None, :, :])

    def f(points):
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, pts.shape[-1])
        return log_density(params, flat).reshape(pts.shape[:-1])

    return f


def _simulate_chunk(args):
    seed, sid, n, m, true_chol, pred_mean, pred_chol, names, n_ref, dirs = args
    gen = RngStream(seed, sid).generator()
    d = true_chol.shape[0]
    y = gen.standard_normal((n, d)) @ true_chol.T
    ens = pred_mean + gen.standard_normal((n, m, d)) @ pred_chol.T
    # independent reference draw: PCA directions and copula CDFs come from it
    ref = pred_mean + gen.standard_normal((n, n_ref, d)) @ pred_chol.T
    ctx = PreRankContext(log_density=_gaussian_logpdf(pred_mean, pred_chol), samples=ref)
    out = {}
    for name in names:
        out[name] = prerank_pits(PreRank.parse(name), y, ens, ctx, mode="hard", direction=dirs.get(name))
    return out


def run_simulation(true_spec: ExpCovSpec, misspec: MisspecSpec, n: int, m: int, preranks,
                   rng=0, workers: int = 1, n_ref: int = 200, pca_source: str = "analytic") -> SimulationRun:
    """Draw ``n`` cases and their ensembles; return hard projected PITs per pre-rank.

    Cases are generated in fixed chunks with one random stream per chunk, so
    results do not depend on ``workers``. ``n_ref`` predictive draws per case,
    independent of the ensemble, estimate the copula CDF and, when
    ``pca_source="reference"``, the PCA direction. With "analytic" the
    direction is the exact principal axis of the forecast covariance.
    """
    if pca_source not in ("analytic", "reference"):
        raise ScenarioError(f"unknown pca_source {pca_source!r}")
    if n_ref < 2:
        raise ScenarioError("need n_ref >= 2")
    if n < 1 or m < 2:
        raise ScenarioError("need n >= 1 and m >= 2")
    names = [PreRank.parse(p).name for p in preranks]
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    true_cov = build_cov(true_spec)
    pred_mean, pred_cov = misspec.predictive(true_spec)
    true_chol = cholesky(true_cov)
    pred_chol = cholesky(pred_cov)
    dirs = {}
    if pca_source == "analytic":
        vecs = sym_eigen(pred_cov).vectors
        for name in names:
            pr = PreRank.parse(name)
            if pr.kind == "pca":
                if pr.param > vecs.shape[1]:
                    raise ScenarioError(f"{name} exceeds dimension {vecs.shape[1]}")
                dirs[name] = vecs[:, pr.param - 1].copy()
    jobs = []
    for chunk, start in enumerate(range(0, n, CASE_CHUNK)):
        jobs.append((stream.seed, stream.stream_id + (chunk,), min(CASE_CHUNK, n - start), m, true_chol, pred_mean, pred_chol, names, n_ref, dirs))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_simulate_chunk, jobs))
    else:
        parts = [_simulate_chunk(j) for j in jobs]
    pits = {name: np.concatenate([p[name] for p in parts], axis=0) for name in names}
    return SimulationRun(n, m, true_spec, misspec, pred_mean, pred_cov, pits)
