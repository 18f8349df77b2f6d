"""Minibatch training of the mixture hypernetwork with a pre-rank calibration penalty.

The objective is mean NLL plus ``lam`` times the smoothed PCE of projected
PITs computed from reparameterized ensemble draws. Evaluation uses hard PITs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diagnostics import QuantileGrid, energy_score, pce, pce_kde, prerank_pits
from .model import Hypernetwork, MixtureParams, draw_noise, log_density, nll, sample
from .numerics import RngStream, sym_eigen
from .preranks import PreRank, PreRankContext

log = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 0.01, 0.1, 1.0, 5.0, 10.0)
ES_SLACK = 1.1

# stream ids below the run seed
_INIT, _SHUFFLE, _NOISE, _EVAL = 1, 2, 3, 4


class TrainingError(ValueError):
    pass


class NonFiniteLoss(TrainingError):
    def __init__(self, msg, epoch=None, batch=None):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lam: float = 0.0
    tau: float = 100.0
    p: float = 1.0
    grid_size: int = 100
    m: int = 16
    batch_size: int = 512
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    preranks: list = field(default_factory=lambda: ["marg"])
    prerank_weights: list | None = None
    seed: int = 0
    n_components: int = 5
    hidden: list = field(default_factory=lambda: [100, 100, 100])
    diag_only: bool = False
    tau_cop: float = 100.0
    n_ref: int = 64
    reg_scope: str = "batch"
    eval_m: int = 20
    eval_every: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise TrainingError("lam must be >= 0")
        if self.tau <= 0:
            raise TrainingError("tau must be positive")
        if self.p < 1:
            raise TrainingError("p must be >= 1")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2")
        if self.m < 1 or self.eval_m < 2:
            raise TrainingError("need m >= 1 and eval_m >= 2")
        if self.epochs < 0 or self.lr <= 0:
            raise TrainingError("need epochs >= 0 and lr > 0")
        if self.reg_scope not in ("batch", "full"):
            raise TrainingError(f"unknown reg_scope {self.reg_scope!r}")
        self.preranks = [PreRank.parse(p).name for p in self.preranks]
        if self.prerank_weights is None:
            self.prerank_weights = [1.0] * len(self.preranks)
        if len(self.prerank_weights) != len(self.preranks) or min(self.prerank_weights, default=1) < 0:
            raise TrainingError("prerank_weights must be nonnegative, one per pre-rank")
        self.hidden = [int(h) for h in self.hidden]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise TrainingError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig(**d)

    @property
    def grid(self) -> np.ndarray:
        return QuantileGrid.uniform(self.grid_size).levels

    def network(self, input_dim: int, output_dim: int) -> Hypernetwork:
        return Hypernetwork(input_dim, output_dim, self.n_components, tuple(self.hidden), self.diag_only)


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise TrainingError("x and y must be 2-D with the same number of rows")

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx])


# ------------------------------------------------------------------ loss

@dataclass
class BatchNoise:
    """All randomness of one loss evaluation, so it can be replayed exactly."""

    ens: tuple
    ref: tuple | None = None

    @classmethod
    def draw(cls, rng, n: int, m: int, d: int, n_ref: int | None = None) -> "BatchNoise":
        gen = rng.generator() if isinstance(rng, RngStream) else np.random.default_rng(rng)
        ens = draw_noise(gen, (n, m), d)
        ref = draw_noise(gen, (n, n_ref), d) if n_ref else None
        return cls(ens, ref)

    def repeat(self, k: int) -> "BatchNoise":
        def rep(t):
            return None if t is None else tuple(np.concatenate([a] * k, axis=0) for a in t)
        return BatchNoise(rep(self.ens), rep(self.ref))


def _needs_ref(preranks) -> bool:
    return any(PreRank.parse(p).kind == "copula" for p in preranks)


def pca_directions(params: MixtureParams, k: int) -> np.ndarray:
    """k-th principal axis of each case's mixture covariance, shape (N, D)."""
    cov = params.detach().covariance()
    return sym_eigen(cov).vectors[..., :, k - 1]


def regularizer(params: MixtureParams, y, cfg: TrainConfig, noise: BatchNoise):
    """Weighted mean over pre-ranks of the smoothed PCE of smooth projected PITs."""
    ens = sample(params, cfg.m, grad_mode="reparam", noise=noise.ens).samples
    ref = None
    if noise.ref is not None:
        ref = sample(params, noise.ref[0].shape[-1], grad_mode="reparam", noise=noise.ref).samples
    ctx = PreRankContext(log_density=lambda pts: log_density(params, pts), samples=ref, tau_cop=cfg.tau_cop)
    total, wsum = 0.0, 0.0
    for name, w in zip(cfg.preranks, cfg.prerank_weights):
        if w == 0:
            continue
        pr = PreRank.parse(name)
        direction = pca_directions(params, pr.param) if pr.kind == "pca" else None
        z = prerank_pits(pr, y, ens, ctx, mode="smooth", tau=cfg.tau, copula_mode="smooth", direction=direction)
        total = ad.add(total, ad.mul(pce_kde(z, cfg.grid, cfg.tau, cfg.p), float(w)))
        wsum += w
    return ad.div(total, wsum) if wsum > 0 else total


def batch_loss(net: Hypernetwork, theta, x, y, cfg: TrainConfig, noise: BatchNoise | None = None, rng=None):
    """Mean NLL over the batch plus ``cfg.lam`` times the pre-rank regularizer.

    ``theta`` may be a Var (inside :func:`autodiff.value_and_grad`) or an array.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 2:
        raise TrainingError("batch needs at least 2 cases")
    params = net.forward(theta, x)
    loss = ad.mean(nll(params, y))
    if cfg.lam == 0 or not cfg.preranks:
        return loss
    if noise is None:
        n_ref = cfg.n_ref if _needs_ref(cfg.preranks) else None
        noise = BatchNoise.draw(rng, y.shape[0], cfg.m, y.shape[1], n_ref)
    return ad.add(loss, ad.mul(regularizer(params, y, cfg, noise), float(cfg.lam)))


# ------------------------------------------------------------------ optimizer

class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalResult:
    nll: float
    energy_score: float
    pce: dict
    pits: dict = field(repr=False)

    def row(self) -> dict:
        out = {"val_nll": self.nll}
        out.update({f"val_pce_{k}": v for k, v in self.pce.items()})
        out["val_es"] = self.energy_score
        return out


def evaluate(net: Hypernetwork, theta, data: Split, preranks, m: int = 20, rng=0,
             n_ref: int = 64, tau_cop: float = 100.0, grid=None, chunk: int = 1024) -> EvalResult:
    """NLL, energy score and hard-PIT PCE per pre-rank on ``data``.

    Randomness comes from one stream per chunk of ``chunk`` cases, so the
    result is fixed by ``rng`` alone.
    """
    theta = theta.values if isinstance(theta, ad.ParamVector) else np.asarray(theta)
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    names = [PreRank.parse(p).name for p in preranks]
    need_ref = _needs_ref(names)
    nlls, ess = [], []
    pits = {n: [] for n in names}
    for ci, start in enumerate(range(0, len(data), chunk)):
        part = data.take(slice(start, start + chunk))
        gen = stream.spawn(ci).generator()
        params = net.forward(theta, part.x)
        nlls.append(nll(params, part.y))
        ens = sample(params, m, gen).samples
        ref = sample(params, n_ref, gen).samples if need_ref else None
        ess.append(energy_score(part.y, ens))
        ctx = PreRankContext(log_density=lambda pts, p=params: log_density(p, pts), samples=ref, tau_cop=tau_cop)
        for name in names:
            pr = PreRank.parse(name)
            direction = pca_directions(params, pr.param) if pr.kind == "pca" else None
            pits[name].append(prerank_pits(pr, part.y, ens, ctx, mode="hard", direction=direction))
    pits = {k: np.concatenate(v, axis=0) for k, v in pits.items()}
    return EvalResult(
        float(np.mean(np.concatenate(nlls))),
        float(np.mean(np.concatenate(ess))),
        {k: pce(v, grid) for k, v in pits.items()},
        pits,
    )


# ------------------------------------------------------------------ training

@dataclass
class TrainedModel:
    net: Hypernetwork
    params: ad.ParamVector
    cfg: TrainConfig
    trace: list
    initial: dict | None = None

    def final_metrics(self) -> dict:
        return self.trace[-1] if self.trace else (self.initial or {})


def _step_loss(net, x, y, cfg, noise, full_reg):
    def f(theta):
        if full_reg is None:
            return batch_loss(net, theta, x, y, cfg, noise)
        fx, fy, fnoise = full_reg
        loss = ad.mean(nll(net.forward(theta, x), y))
        params = net.forward(theta, fx)
        return ad.add(loss, ad.mul(regularizer(params, fy, cfg, fnoise), float(cfg.lam)))
    return f


def train(train_data: Split, val_data: Split | None, cfg: TrainConfig, evaluate_initial: bool = True) -> TrainedModel:
    """Adam on minibatches for ``cfg.epochs`` epochs; deterministic given ``cfg.seed``."""
    if len(train_data) < 2:
        raise TrainingError("training split needs at least 2 cases")
    if train_data.y.shape[1] < 2:
        raise TrainingError("targets must have D >= 2")
    root = RngStream(cfg.seed)
    net = cfg.network(train_data.x.shape[1], train_data.y.shape[1])
    params = net.init_params(root.spawn(_INIT).generator())
    theta = params.values.copy()
    opt = Adam(theta.size, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
    n = len(train_data)
    bs = min(cfg.batch_size, n)
    n_ref = cfg.n_ref if _needs_ref(cfg.preranks) else None
    d = train_data.y.shape[1]

    def eval_row():
        if val_data is None:
            return {}
        r = evaluate(net, theta, val_data, cfg.preranks, cfg.eval_m, root.spawn(_EVAL), cfg.n_ref, cfg.tau_cop, cfg.grid)
        return r.row()

    initial = eval_row() if evaluate_initial else None
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        perm = root.spawn(_SHUFFLE, epoch).generator().permutation(n)
        losses = []
        starts = list(range(0, n, bs))
        if len(starts) > 1 and n - starts[-1] < 2:
            starts.pop()  # fold a singleton tail batch into the previous one
        for b, start in enumerate(starts):
            stop = starts[b + 1] if b + 1 < len(starts) else n
            idx = perm[start:stop]
            noise_gen = root.spawn(_NOISE, epoch, b).generator()
            full_reg = None
            if cfg.reg_scope == "full" and cfg.lam > 0:
                fnoise = BatchNoise.draw(noise_gen, n, cfg.m, d, n_ref)
                full_reg = (train_data.x, train_data.y, fnoise)
                noise = None
            else:
                noise = BatchNoise.draw(noise_gen, len(idx), cfg.m, d, n_ref) if cfg.lam > 0 else None
            try:
                val, g = ad.value_and_grad(_step_loss(net, train_data.x[idx], train_data.y[idx], cfg, noise, full_reg), theta)
            except ad.NonFiniteValue as exc:
                raise NonFiniteLoss(f"non-finite value at epoch {epoch} batch {b}: {exc}", epoch, b) from exc
            if not np.isfinite(val) or not np.all(np.isfinite(g)):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} batch {b}", epoch, b)
            theta = opt.step(theta, g)
            losses.append(val)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            row.update(eval_row())
        trace.append(row)
        log.debug("epoch %d loss %.5f", epoch, row["train_loss"])
    return TrainedModel(net, params.copy(theta), cfg, trace, initial)


# ------------------------------------------------------------------ lambda selection

@dataclass
class LambdaSelection:
    candidates: list
    pce: list
    es: list
    chosen: float
    es_limit: float
    models: dict = field(default_factory=dict, repr=False)

    @property
    def slack(self) -> float:
        """ES headroom of the chosen model below the feasibility limit."""
        return self.es_limit - self.es[self.candidates.index(self.chosen)]

    def to_dict(self) -> dict:
        return {
            "candidates": self.candidates,
            "pce": self.pce,
            "energy_score": self.es,
            "chosen": self.chosen,
            "es_limit": self.es_limit,
            "slack": self.slack,
        }


def choose_lambda(candidates, pce_values, es_values, slack: float = ES_SLACK) -> tuple:
    """Minimise PCE subject to ES <= slack * ES(lam=0); fall back to 0.

    Returns ``(chosen, es_limit)``. Ties in PCE go to the smaller lambda.
    """
    candidates = [float(c) for c in candidates]
    if 0.0 not in candidates:
        raise TrainingError("lambda grid must contain 0")
    es0 = es_values[candidates.index(0.0)]
    limit = slack * es0
    best = 0.0
    best_pce = pce_values[candidates.index(0.0)]
    for lam, p, e in sorted(zip(candidates, pce_values, es_values)):
        if e <= limit and p < best_pce:
            best, best_pce = lam, p
    return best, limit


def _selection_score(metrics: dict, cfg: TrainConfig) -> float:
    w = np.asarray(cfg.prerank_weights, dtype=float)
    vals = np.array([metrics[f"val_pce_{n}"] for n in cfg.preranks])
    return float(np.sum(w * vals) / np.sum(w)) if w.sum() > 0 else float(vals.mean())


def _train_quiet(train_data, val_data, cfg):
    return train(train_data, val_data, cfg, evaluate_initial=False)


def _train_job(args):
    trainer, train_data, val_data, cfg = args
    return trainer(train_data, val_data, cfg)


def select_lambda(train_data: Split, val_data: Split, cfg: TrainConfig, grid=LAMBDA_GRID,
                  trainer=None, workers: int = 1) -> LambdaSelection:
    """Train one model per lambda and apply :func:`choose_lambda` to validation metrics."""
    trainer = trainer or _train_quiet
    grid = [float(g) for g in grid]
    if 0.0 not in grid:
        raise TrainingError("lambda grid must contain 0")
    jobs = [(trainer, train_data, val_data, cfg.replace(lam=lam)) for lam in grid]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            models = list(ex.map(_train_job, jobs))
    else:
        models = [_train_job(j) for j in jobs]
    finals = [m.final_metrics() for m in models]
    pces = [_selection_score(f, cfg) for f in finals]
    ess = [float(f["val_es"]) for f in finals]
    chosen, limit = choose_lambda(grid, pces, ess)
    return LambdaSelection(grid, pces, ess, chosen, limit, dict(zip(grid, models)))
