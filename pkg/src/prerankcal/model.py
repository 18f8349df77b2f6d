"""Gaussian-mixture predictive distribution produced by a feed-forward hypernetwork."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import as_generator

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MixtureParams:
    """Mixture parameters with arbitrary leading batch dimensions.

    ``log_weights`` is (..., K), ``means`` (..., K, D), ``chol`` (..., K, D, D).
    Entries may be numpy arrays or autodiff Vars.
    """

    log_weights: object
    means: object
    chol: object

    @property
    def weights(self) -> np.ndarray:
        return np.exp(ad.value(self.log_weights))

    @property
    def n_components(self) -> int:
        return ad.value(self.means).shape[-2]

    @property
    def dim(self) -> int:
        return ad.value(self.means).shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return ad.value(self.means).shape[:-2]

    @classmethod
    def from_arrays(cls, weights, means, chol) -> "MixtureParams":
        w = np.asarray(weights, dtype=float)
        with np.errstate(divide="ignore"):
            logw = np.log(w / w.sum(axis=-1, keepdims=True))
        return cls(logw, np.asarray(means, dtype=float), np.asarray(chol, dtype=float))

    def detach(self) -> "MixtureParams":
        return MixtureParams(ad.value(self.log_weights), ad.value(self.means), ad.value(self.chol))

    def take(self, index) -> "MixtureParams":
        """Select cases along the (single) leading batch axis."""
        return MixtureParams(
            ad.getitem(self.log_weights, index), ad.getitem(self.means, index), ad.getitem(self.chol, index)
        )

    def covariance(self) -> np.ndarray:
        """Covariance of the whole mixture, shape (..., D, D)."""
        w = self.weights
        mu = ad.value(self.means)
        L = ad.value(self.chol)
        comp = L @ np.swapaxes(L, -1, -2)
        mbar = np.sum(w[..., None] * mu, axis=-2)
        second = np.sum(w[..., None, None] * (comp + mu[..., :, None] * mu[..., None, :]), axis=-3)
        return second - mbar[..., :, None] * mbar[..., None, :]


def log_density(params: MixtureParams, y):
    """log sum_k pi_k N(y; mu_k, L_k L_k^T), via log-sum-exp.

    ``y`` has shape ``batch + extra + (D,)``: any dimensions beyond the
    parameter batch are treated as several points per case.
    """
    mv = ad.value(params.means)
    batch = mv.shape[:-2]
    k, d = mv.shape[-2:]
    yv = ad.value(y)
    if yv.shape[-1] != d:
        raise ValueError(f"y has dimension {yv.shape[-1]}, mixture has {d}")
    extra = yv.ndim - 1 - len(batch)
    if extra < 0 or yv.shape[: len(batch)] != batch:
        raise ValueError(f"y shape {yv.shape} incompatible with parameter batch {batch}")
    pad = (1,) * extra

    linv = ad.inv_lower(params.chol)
    ar = np.arange(d)
    logdiag = ad.log(ad.getitem(params.chol, (Ellipsis, ar, ar)))
    logdet = ad.sum_(logdiag, axis=-1)  # batch + (K,)

    means = ad.reshape(params.means, batch + pad + (k, d))
    linv = ad.reshape(linv, batch + pad + (k, d, d))
    logw = ad.reshape(params.log_weights, batch + pad + (k,))
    logdet = ad.reshape(logdet, batch + pad + (k,))
    yy = ad.reshape(y, yv.shape[:-1] + (1, d))

    z = ad.matvec(linv, ad.sub(yy, means))
    maha = ad.sum_(ad.mul(z, z), axis=-1)
    comp = logw - 0.5 * maha - logdet - 0.5 * d * LOG_2PI
    return ad.logsumexp(comp, axis=-1)


def nll(params: MixtureParams, y):
    return -log_density(params, y)


@dataclass
class PredictiveSampleSet:
    """Samples with the noise that produced them.

    ``samples[..., m, :] == means[k] + chol[k] @ eps[..., m, :]`` where ``k`` is
    ``components[..., m]``.
    """

    samples: object
    components: np.ndarray
    eps: np.ndarray
    x: np.ndarray | None = None

    @property
    def values(self) -> np.ndarray:
        return ad.value(self.samples)


def draw_noise(rng, shape, dim):
    """Uniforms for component selection and standard normals, for ``shape`` draws."""
    gen = as_generator(rng)
    u = gen.random(shape)
    eps = gen.standard_normal(tuple(shape) + (dim,))
    return u, eps


def select_components(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw; ``weights`` (..., K), ``u`` (..., M)."""
    cw = np.cumsum(weights, axis=-1)
    cw[..., -1] = np.inf
    k = np.sum(u[..., :, None] >= cw[..., None, :], axis=-1)
    return np.minimum(k, weights.shape[-1] - 1)


def sample(params: MixtureParams, m: int = 1, rng=None, grad_mode: str = "none", noise=None) -> PredictiveSampleSet:
    """Draw ``m`` samples per case.

    The component draw is never differentiated. With ``grad_mode="reparam"``
    gradients flow into the selected means and Cholesky factors.
    """
    if m < 1:
        raise ValueError("need m >= 1")
    if grad_mode not in ("none", "reparam"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    if grad_mode == "none":
        params = params.detach()
    batch = params.batch_shape
    k, d = params.n_components, params.dim
    if noise is None:
        noise = draw_noise(rng, batch + (m,), d)
    u, eps = noise
    comp = select_components(params.weights, u)

    nb = int(np.prod(batch)) if batch else 1
    means = ad.reshape(params.means, (nb, k, d))
    chol = ad.reshape(params.chol, (nb, k, d, d))
    ci = comp.reshape(nb, m)
    rows = np.arange(nb)[:, None]
    mu = ad.getitem(means, (rows, ci))
    L = ad.getitem(chol, (rows, ci))
    out = ad.add(mu, ad.matvec(L, eps.reshape(nb, m, d)))
    out = ad.reshape(out, batch + (m, d))
    return PredictiveSampleSet(out, comp, eps)


def mc_cdf(params: MixtureParams, y, s: int, tau_cop: float = 100.0, mode: str = "hard", rng=None):
    """Monte-Carlo joint CDF of the mixture at ``y`` from ``s`` fresh samples."""
    from .preranks import PreRankContext, copula

    draws = sample(params, s, rng)
    ctx = PreRankContext(samples=draws.values, tau_cop=tau_cop)
    return copula(y, ctx, mode=mode)


# ------------------------------------------------------------------ network

def _chol_index(d: int, diag_only: bool):
    """Map each (i, j) of an L matrix to a head entry; mask zeroes the rest."""
    idx = np.zeros((d, d), dtype=int)
    mask = np.zeros((d, d))
    if diag_only:
        for i in range(d):
            idx[i, i] = i
            mask[i, i] = 1.0
        return idx, mask, np.ones(d)
    rows, cols = np.tril_indices(d)
    for e, (i, j) in enumerate(zip(rows, cols)):
        idx[i, j] = e
        mask[i, j] = 1.0
    return idx, mask, (rows == cols).astype(float)


@dataclass
class Hypernetwork:
    """MLP mapping x to mixture weights, means and Cholesky factors."""

    input_dim: int
    output_dim: int
    n_components: int = 5
    hidden: tuple = (100, 100, 100)
    diag_only: bool = False
    template: ad.ParamVector = field(init=False, repr=False)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.template = ad.ParamVector.from_shapes(self.param_shapes())

    @property
    def n_chol(self) -> int:
        d = self.output_dim
        return d if self.diag_only else d * (d + 1) // 2

    def param_shapes(self):
        shapes = []
        fan_in = self.input_dim
        for i, h in enumerate(self.hidden):
            shapes += [(f"W{i}", (fan_in, h)), (f"b{i}", (h,))]
            fan_in = h
        k, d = self.n_components, self.output_dim
        shapes += [
            ("W_logits", (fan_in, k)), ("b_logits", (k,)),
            ("W_means", (fan_in, k * d)), ("b_means", (k * d,)),
            ("W_chol", (fan_in, k * self.n_chol)), ("b_chol", (k * self.n_chol,)),
        ]
        return shapes

    def init_params(self, rng) -> ad.ParamVector:
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        gen = as_generator(rng)
        pv = self.template.copy()
        for name, (offset, shape) in pv.segments.items():
            n = int(np.prod(shape))
            if name.startswith("W"):
                bound = 1.0 / np.sqrt(shape[0])
                pv.values[offset:offset + n] = gen.uniform(-bound, bound, n)
        return pv

    def forward(self, theta, x) -> MixtureParams:
        p = self.template.unpack(theta)
        h = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(h)):
            raise ad.NonFiniteValue("input features are not finite")
        single = h.ndim == 1
        if single:
            h = h[None, :]
        for i in range(len(self.hidden)):
            h = ad.relu(ad.add(_dense(h, p[f"W{i}"]), p[f"b{i}"]))
        n = h.shape[0] if not isinstance(h, ad.Var) else h.value.shape[0]
        k, d = self.n_components, self.output_dim

        logits = ad.add(_dense(h, p["W_logits"]), p["b_logits"])
        means = ad.reshape(ad.add(_dense(h, p["W_means"]), p["b_means"]), (n, k, d))
        raw = ad.reshape(ad.add(_dense(h, p["W_chol"]), p["b_chol"]), (n, k, self.n_chol))

        idx, mask, diag_entries = _chol_index(d, self.diag_only)
        entries = ad.add(ad.mul(ad.softplus(raw), diag_entries), ad.mul(raw, 1.0 - diag_entries))
        chol = ad.mul(ad.getitem(entries, (Ellipsis, idx)), mask)

        params = MixtureParams(ad.log_softmax(logits, axis=-1), means, chol)
        if not np.all(np.isfinite(ad.value(chol))) or not np.all(np.isfinite(ad.value(means))):
            raise ad.NonFiniteValue("non-finite network output")
        if single:
            params = params.take(0)
        return params

    def architecture(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "n_components": self.n_components,
            "hidden": list(self.hidden),
            "diag_only": self.diag_only,
        }


def _dense(h, w):
    return ad.matmul(h, w)


def dump_checkpoint(net: Hypernetwork, params: ad.ParamVector, extra: dict | None = None) -> str:
    """Checkpoint as JSON text; parameters are written as round-trip decimal strings."""
    doc = {
        "architecture": net.architecture(),
        "params": [repr(float(v)) for v in params.values],
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, indent=1, sort_keys=True)


def load_checkpoint(text: str):
    doc = json.loads(text)
    arch = doc["architecture"]
    net = Hypernetwork(
        arch["input_dim"], arch["output_dim"], arch["n_components"], tuple(arch["hidden"]), arch["diag_only"]
    )
    values = np.array([float(v) for v in doc["params"]])
    return net, net.template.copy(values), doc.get("extra", {})
