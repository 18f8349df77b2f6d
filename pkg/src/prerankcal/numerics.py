"""Linear algebra and random-stream primitives.

Everything here works on float64 numpy arrays. The eigensolver is a cyclic
Jacobi iteration that accepts a stack of matrices ``(..., D, D)`` so that a
PCA direction can be computed for every forecast case in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYM_TOL = 1e-10
PIVOT_TOL = 1e-12
MAX_SWEEPS = 100


class NumericsError(ValueError):
    pass


class NotPositiveDefinite(NumericsError):
    pass


class NotConverged(NumericsError):
    pass


class TooFewSamples(NumericsError):
    pass


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints; sub-streams are derived
    with :meth:`spawn`, so work split across processes only has to agree on
    ids, never on draw order.
    """

    seed: int
    stream_id: tuple = field(default=())

    def __post_init__(self):
        sid = self.stream_id
        if isinstance(sid, (int, np.integer)):
            sid = (int(sid),)
        object.__setattr__(self, "stream_id", tuple(int(s) for s in sid))

    def spawn(self, *sub_id: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(sub_id))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_symmetric(a: np.ndarray) -> None:
    if a.shape[-1] != a.shape[-2]:
        raise NumericsError(f"matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0) > SYM_TOL * scale:
        raise NumericsError("matrix is not symmetric")


def cholesky(sigma) -> np.ndarray:
    """Lower-triangular L with L @ L.T == sigma (column-by-column Cholesky)."""
    a = np.array(sigma, dtype=float)
    if a.ndim != 2:
        raise NumericsError("cholesky expects a single 2-D matrix")
    _check_symmetric(a)
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - np.dot(L[j, :j], L[j, :j])
        if pivot <= PIVOT_TOL:
            raise NotPositiveDefinite(f"pivot {j} is {pivot:.3e}")
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass
class EigenDecomposition:
    values: np.ndarray   # (..., D) descending
    vectors: np.ndarray  # (..., D, D) eigenvectors in columns

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values[..., None, :]) @ np.swapaxes(self.vectors, -1, -2)


def _off_norm(a: np.ndarray) -> np.ndarray:
    # a is (n, n, batch)
    off = a * (1.0 - np.eye(a.shape[0]))[:, :, None]
    return np.sqrt(np.sum(off * off, axis=(0, 1)))


def _jacobi_single(a: np.ndarray, thresh: float, negligible: float, max_sweeps: int):
    """Unbatched cyclic Jacobi on one (n, n) matrix; same rotations as the batched loop."""
    n = a.shape[0]
    v = np.eye(n)
    mask = 1.0 - np.eye(n)
    sweeps = 0
    while np.sqrt(np.sum((a * mask) ** 2)) > thresh:
        if sweeps >= max_sweeps:
            raise NotConverged(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(a[p, q])
                if abs(apq) <= negligible:
                    a[p, q] = a[q, p] = 0.0
                    continue
                app, aqq = float(a[p, p]), float(a[q, q])
                theta = (aqq - app) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = apq / (aqq - app)
                else:
                    t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rowp, rowq = a[p].copy(), a[q].copy()
                newp = c * rowp - s * rowq
                newq = s * rowp + c * rowq
                a[p], a[q] = newp, newq
                a[:, p], a[:, q] = newp, newq
                a[p, p] = c * c * app - 2.0 * c * s * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * c * s * apq + c * c * aqq
                a[p, q] = a[q, p] = 0.0
                colp, colq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * colp - s * colq
                v[:, q] = s * colp + c * colq
    return np.diag(a).copy(), v


def sym_eigen(sigma, tol: float = 1e-14, max_sweeps: int = MAX_SWEEPS) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of one or a stack of symmetric matrices.

    Eigenvalues are returned in descending order. Each eigenvector is signed so
    that its entry of largest magnitude is positive (first such entry on ties).
    """
    a = np.array(sigma, dtype=float)
    _check_symmetric(a)
    batch = a.shape[:-2]
    n = a.shape[-1]
    # batch on the last axis keeps every row slice contiguous
    a = np.ascontiguousarray(np.moveaxis(a.reshape((-1, n, n)), 0, -1))
    a = 0.5 * (a + np.swapaxes(a, 0, 1))
    nb = a.shape[-1]
    vt = np.broadcast_to(np.eye(n)[:, :, None], (n, n, nb)).copy()  # vt[j] = column j
    scale = np.sqrt(np.sum(a * a, axis=(0, 1)))
    scale = np.where(scale > 0, scale, 1.0)
    thresh = tol * scale
    negligible = 1e-17 * scale

    if nb == 1:
        vals, v = _jacobi_single(np.ascontiguousarray(a[:, :, 0]), float(thresh[0]), float(negligible[0]), max_sweeps)
        return _finish(vals[None], v[None], batch, n)

    sweeps = 0
    while np.any(_off_norm(a) > thresh):
        if sweeps >= max_sweeps:
            raise NotConverged(f"Jacobi did not converge in {max_sweeps} sweeps")
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q].copy()
                active = np.abs(apq) > negligible
                if not active.any():
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                app, aqq = a[p, p].copy(), a[q, q].copy()
                safe = np.where(active, apq, 1.0)
                theta = (aqq - app) / (2.0 * safe)
                big = np.abs(theta) > 1e150
                theta = np.where(big, 1.0, theta)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                t = np.where(big, safe / np.where(big, aqq - app, 1.0), t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rowp, rowq = a[p].copy(), a[q].copy()
                newp = c * rowp - s * rowq
                newq = s * rowp + c * rowq
                a[p] = newp
                a[q] = newq
                a[:, p] = newp
                a[:, q] = newq
                a[p, p] = c * c * app - 2.0 * c * s * apq + s * s * aqq
                a[q, q] = s * s * app + 2.0 * c * s * apq + c * c * aqq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = vt[p].copy(), vt[q].copy()
                vt[p] = c * vp - s * vq
                vt[q] = s * vp + c * vq

    vals = np.moveaxis(np.diagonal(a, axis1=0, axis2=1), -1, -1).copy()  # (batch, n)
    v = np.moveaxis(vt, -1, 0).transpose(0, 2, 1)  # (batch, n, n), columns are vectors
    return _finish(vals, v, batch, n)


def _finish(vals, v, batch, n) -> EigenDecomposition:
    order = np.argsort(-vals, axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    # sign convention: largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(v), axis=-2)
    lead = np.take_along_axis(v, idx[:, None, :], axis=-2)[:, 0, :]
    v = v * np.where(lead < 0, -1.0, 1.0)[:, None, :]
    return EigenDecomposition(vals.reshape(batch + (n,)), np.ascontiguousarray(v).reshape(batch + (n, n)))


def sample_covariance(samples) -> np.ndarray:
    """Population covariance (divisor M) of samples shaped ``(..., M, D)``.

    Samples are put in lexicographic order before summation so the result does
    not depend on the order in which they were supplied.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    m = x.shape[-2]
    if m < 2:
        raise TooFewSamples(f"need at least 2 samples, got {m}")
    keys = np.moveaxis(x, -1, 0)[::-1]
    order = np.lexsort(keys, axis=-1)
    x = np.take_along_axis(x, order[..., None], axis=-2)
    centred = x - x.mean(axis=-2, keepdims=True)
    cov = np.swapaxes(centred, -1, -2) @ centred / m
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def mvn_sample(mean, chol, rng=None, size=None, eps=None) -> np.ndarray:
    """Draw ``mean + chol @ eps`` with standard-normal ``eps``.

    ``size`` prepends sample dimensions; passing ``eps`` explicitly bypasses
    the random stream.
    """
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(chol, dtype=float)
    d = mean.shape[-1]
    if chol.shape[-2:] != (d, d):
        raise NumericsError(f"chol shape {chol.shape} does not match mean dimension {d}")
    if eps is None:
        shape = (() if size is None else tuple(np.atleast_1d(size))) + (d,)
        eps = as_generator(rng).standard_normal(shape)
    eps = np.asarray(eps, dtype=float)
    if chol.ndim == 2:
        return mean + eps @ chol.T
    return mean + (chol @ eps[..., None])[..., 0]
