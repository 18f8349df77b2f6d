"""Acceptance criteria 1-11. Each test prints and records one PASS/FAIL line."""

import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import VERDICTS
from prerankcal import autodiff as ad
from prerankcal.data import correlated_noise_regression, from_arrays
from prerankcal.diagnostics import null_distribution, pce, pce_kde, projected_pit
from prerankcal.model import Hypernetwork, nll
from prerankcal.numerics import RngStream, cholesky, sym_eigen
from prerankcal.preranks import PreRank, PreRankContext
from prerankcal.scenarios import ExpCovSpec, MisspecSpec, _gaussian_logpdf, run_simulation
from prerankcal.training import (
    BatchNoise, Split, TrainConfig, TrainedModel, batch_loss, evaluate, regularizer, select_lambda, train,
)

SIM_PRERANKS = ["marg", "loc", "scale", "dep:1", "hdr", "pca:1"]


def verdict(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


# ------------------------------------------------------------ 1-4 properties

def test_c1_numerics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(200):
        d = int(rng.integers(1, 26))
        a = rng.standard_normal((d, d))
        s = a @ a.T + 0.1 * np.eye(d)
        nrm = np.linalg.norm(s)
        L = cholesky(s)
        e = sym_eigen(s)
        errs = [
            np.linalg.norm(L @ L.T - s) / nrm,
            np.abs(np.triu(L, 1)).max(initial=0.0),
            np.linalg.norm(e.reconstruct() - s) / nrm,
            np.abs(e.vectors.T @ e.vectors - np.eye(d)).max(),
            np.abs(e.vectors @ e.vectors.T - np.eye(d)).max(),
        ]
        worst = max(worst, *errs)
    secs = time.perf_counter() - t0
    verdict(1, worst < 1e-10 and secs < 10, f"max invariant error {worst:.2e} (tol 1e-10), {secs:.1f}s (limit 10s)")


def test_c2_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    x = rng.standard_normal((8, 3))
    y = rng.standard_normal((8, 2))
    # (a) mixture NLL through the hypernetwork
    net = Hypernetwork(3, 2, n_components=2, hidden=[6, 6])
    th = net.init_params(1).values
    err_a = ad.check_gradient(lambda t: ad.mean(nll(net.forward(t, x), y)), th, 1e-6)
    # (b) PCE-KDE regularizer on smooth PITs
    cfg = TrainConfig(n_components=2, hidden=[6, 6], m=16, lam=1.0, preranks=["loc", "dep:1", "marg"])
    noise = BatchNoise.draw(7, 8, 16, 2, cfg.n_ref)
    err_b = ad.check_gradient(lambda t: regularizer(net.forward(t, x), y, cfg, noise), th, 1e-6)
    # (c) the full objective at K=2, D=2, B=8, M=16
    err_c = ad.check_gradient(lambda t: batch_loss(net, t, x, y, cfg, noise), th, 1e-6)
    secs = time.perf_counter() - t0
    worst = max(err_a, err_b, err_c)
    verdict(2, worst < 1e-4 and secs < 30,
            f"rel err nll {err_a:.1e}, pce_kde {err_b:.1e}, batch_loss {err_c:.1e} (tol 1e-4), {secs:.1f}s")


def test_c3_regularizer_limit():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    levels = np.arange(1, 101) / 101
    worst = 0.0
    for _ in range(100):
        z = rng.random(int(rng.integers(5, 400)))
        # keep every PIT at least 1e-4 away from a grid point
        gap = np.abs(z[:, None] - levels[None, :]).min(axis=1)
        z = z[gap > 1e-4]
        worst = max(worst, abs(float(pce_kde(z, tau=1e6, p=1)) - pce(z)))
    secs = time.perf_counter() - t0
    verdict(3, worst < 1e-6 and secs < 5, f"max |pce_kde - pce| {worst:.2e} (tol 1e-6), {secs:.1f}s")


def test_c4_monotone_equivalence():
    rng = np.random.default_rng(3)
    n, m, d = 1000, 20, 4
    cov = 0.5 * np.eye(d) + 0.5
    chol = cholesky(cov)
    mean = np.zeros(d)
    y = rng.standard_normal((n, d)) @ chol.T
    ens = rng.standard_normal((n, m, d)) @ chol.T
    ref = rng.standard_normal((n, 50, d)) @ chol.T
    ctx = PreRankContext(log_density=_gaussian_logpdf(mean, chol), samples=ref)
    direction = sym_eigen(cov).vectors[:, 0]
    bad = []
    names = ["marg", "marg:2", "loc", "scale", "dep:1", "hdr", "copula", "pca:1"]
    for name in names:
        pr = PreRank.parse(name)
        t_obs = pr.apply(y, ctx, direction=direction)
        t_ens = np.swapaxes(pr.apply(ens, ctx, direction=direction), -1, -2)
        base = projected_pit(t_obs, t_ens)
        # rescale before exp so no value overflows
        c = max(1.0, np.abs(t_ens).max() / 50)
        for h in (lambda t: t ** 3, lambda t: np.exp(t / c)):
            if not np.array_equal(projected_pit(h(t_obs), h(t_ens)), base):
                bad.append(name)
    verdict(4, not bad, f"{len(names)} pre-ranks x {n} cases, mismatches: {bad or 'none'}")


# ------------------------------------------------------------ 5-8 simulations

N, M, B = 10_000, 20, 5000


@pytest.fixture(scope="module")
def null_sim():
    null = null_distribution(N, b=B, discretization=M, rng=RngStream(0, (1,)))
    return null.quantile([0.95, 0.99])


_runs = {}


def sim(kind, spec=None, **params):
    key = (kind, spec)
    if key not in _runs:
        true = spec or ExpCovSpec("index", dim=10)
        t0 = time.perf_counter()
        run = run_simulation(true, MisspecSpec(kind, params), N, M, SIM_PRERANKS, rng=RngStream(0, (0,)))
        _runs[key] = ({k: pce(v) for k, v in run.pits.items()}, time.perf_counter() - t0)
    return _runs[key]


SIM1_MISSPEC = [("mean_bias", {"delta": 0.5}), ("variance_scale", {"factor": 1.75}), ("range_change", {"length": 0.3}),
                ("spectrum_scramble", {"gamma": 1.0}), ("pca_structure", {"c": 2.0, "k": 2})]


def test_c5_simulation1_well_specified(null_sim):
    q95, _ = null_sim
    scores, secs = sim("none")
    worst = max(scores, key=scores.get)
    ok = all(v < q95 for v in scores.values()) and secs < 180
    verdict(5, ok, f"max PCE {scores[worst]:.4f} ({worst}) vs null q95 {q95:.4f}, {secs:.1f}s")


def test_c6_pca_detection(null_sim):
    _, q99 = null_sim
    vals = {}
    for kind, params in SIM1_MISSPEC:
        vals[kind] = sim(kind, **params)[0]["pca:1"]
    ok = all(v > q99 for v in vals.values())
    detail = ", ".join(f"{k} {v:.4f}" for k, v in vals.items())
    verdict(6, ok, f"pca:1 PCE {detail} vs q99 {q99:.4f}")


def test_c7_selective_insensitivity(null_sim):
    _, q99 = null_sim
    params = dict(SIM1_MISSPEC)
    checks = {
        "dep:1 | mean_bias": sim("mean_bias", **params["mean_bias"])[0]["dep:1"],
        "dep:1 | variance_scale": sim("variance_scale", **params["variance_scale"])[0]["dep:1"],
        "scale | mean_bias": sim("mean_bias", **params["mean_bias"])[0]["scale"],
    }
    ok = all(v < q99 for v in checks.values())
    verdict(7, ok, ", ".join(f"{k} {v:.4f}" for k, v in checks.items()) + f" vs q99 {q99:.4f}")


def test_c8_simulation2(null_sim):
    q95, q99 = null_sim
    grid = ExpCovSpec("grid", rows=5, cols=5)
    t0 = time.perf_counter()
    well, _ = sim("none", grid)
    iso, _ = sim("isotropy", grid, alpha=5.0)
    flip, _ = sim("pc_anisotropy_flip", grid, a=2.0, k=3)
    secs = time.perf_counter() - t0
    ok = (all(v < q95 for v in well.values())
          and all(s[p] > q99 for s in (iso, flip) for p in ("pca:1", "dep:1"))
          and secs < 300)
    verdict(8, ok, f"well-specified max {max(well.values()):.4f} < q95 {q95:.4f}; isotropy pca {iso['pca:1']:.4f} "
                   f"dep {iso['dep:1']:.4f}; flip pca {flip['pca:1']:.4f} dep {flip['dep:1']:.4f} > q99 {q99:.4f}; "
                   f"{secs:.1f}s")


# ------------------------------------------------------------ 9-10 training

C9_CFG = TrainConfig(preranks=["dep:1"], n_components=1, diag_only=True, epochs=200, lr=1e-3,
                     batch_size=256, m=16, eval_every=50)


@pytest.fixture(scope="module")
def c9_data():
    x, y = correlated_noise_regression(6000, seed=0)
    return from_arrays(x, y, fractions=(0.5, 0.2, 0.3), seed=0)


_models = {}


def cached_trainer(tr, va, cfg):
    """Train once per lambda; criteria 9 and 10 share the runs."""
    if cfg.lam not in _models:
        _models[cfg.lam] = train(tr, va, cfg, evaluate_initial=False)
    return _models[cfg.lam]


def test_c9_training_effect(c9_data):
    t0 = time.perf_counter()
    res = {}
    for lam in (0.0, 10.0):
        mdl = cached_trainer(c9_data.train, c9_data.val, C9_CFG.replace(lam=lam))
        res[lam] = evaluate(mdl.net, mdl.params, c9_data.test, ["dep:1"], m=20, rng=99)
    secs = time.perf_counter() - t0
    p0, p1 = res[0.0].pce["dep:1"], res[10.0].pce["dep:1"]
    e0, e1 = res[0.0].energy_score, res[10.0].energy_score
    drop, rise = 1 - p1 / p0, e1 / e0 - 1
    ok = drop >= 0.5 and rise <= 0.10 and secs < 600
    verdict(9, ok, f"test dep-PCE {p0:.4f} -> {p1:.4f} (-{100 * drop:.0f}%, need >=50%), "
                   f"ES {e0:.4f} -> {e1:.4f} ({100 * rise:+.1f}%, limit +10%), {secs:.0f}s")


def corrupting_trainer(tr, va, cfg):
    """Inflate the predicted scale of every lambda > 0 model, then re-score it on validation."""
    mdl = cached_trainer(tr, va, cfg)
    if cfg.lam == 0:
        return mdl
    theta = mdl.params.values.copy()
    off, shape = mdl.params.segments["b_chol"]
    theta[off:off + int(np.prod(shape))] += 3.0
    row = evaluate(mdl.net, theta, va, cfg.preranks, m=cfg.eval_m, rng=RngStream(cfg.seed).spawn(4)).row()
    return TrainedModel(mdl.net, mdl.params.copy(theta), cfg, [row])


def test_c10_lambda_selection(c9_data):
    grid = [0.0, 0.1, 10.0]
    sel = select_lambda(c9_data.train, c9_data.val, C9_CFG, grid, trainer=cached_trainer)
    limit = 1.1 * sel.es[0]
    feasible = [i for i, e in enumerate(sel.es) if e <= limit]
    best = min(feasible, key=lambda i: (sel.pce[i], grid[i]))
    ok_rule = sel.chosen == grid[best] and sel.es[grid.index(sel.chosen)] <= limit
    adv = select_lambda(c9_data.train, c9_data.val, C9_CFG, grid, trainer=corrupting_trainer)
    all_violate = all(e > 1.1 * adv.es[0] for e in adv.es[1:])
    ok = ok_rule and all_violate and adv.chosen == 0.0
    verdict(10, ok, f"chosen {sel.chosen} (val PCE {[round(p, 4) for p in sel.pce]}, ES {[round(e, 4) for e in sel.es]}); "
                    f"adversarial ES {[round(e, 4) for e in adv.es]} -> chosen {adv.chosen}")


# ------------------------------------------------------------ 11 CLI

def cli(*args):
    proc = subprocess.run([sys.executable, "-m", "prerankcal.cli", *args], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def test_c11_cli_reproducibility(tmp_path):
    sim_cfg = tmp_path / "sim.json"
    sim_cfg.write_text(json.dumps({"N": 1200, "M": 10, "B": 2000, "misspec": {"kind": "mean_bias"}}))
    tr_cfg = tmp_path / "train.json"
    tr_cfg.write_text(json.dumps({
        "data": {"synthetic": "correlated_noise", "n": 400, "seed": 1},
        "train": {"epochs": 3, "lr": 0.001, "n_components": 2, "hidden": [16, 16], "lam": 1.0,
                  "preranks": ["dep:1", "copula", "pca:1"], "batch_size": 64},
        "lambda_grid": [0, 1], "B": 500}))
    results = {}
    for rep in ("a", "b"):
        for threads in ("1", "4"):
            tag = f"{rep}{threads}"
            cli("simulate", "--config", str(sim_cfg), "--out", str(tmp_path / f"sim{tag}"), "--threads", threads)
            cli("train", "--config", str(tr_cfg), "--out", str(tmp_path / f"tr{tag}"), "--threads", threads)
            cli("evaluate", "--config", str(tmp_path / f"tr{tag}" / "manifest.json"),
                "--checkpoint", str(tmp_path / f"tr{tag}" / "checkpoint.json"),
                "--out", str(tmp_path / f"ev{tag}"), "--threads", threads)
            results[tag] = [outputs(tmp_path / f"{c}{tag}") for c in ("sim", "tr", "ev")]
    ref = results["a1"]
    same = all(results[t] == ref for t in results)
    n_files = sum(len(r) for r in ref)
    verdict(11, same and n_files >= 8, f"{n_files} output files byte-identical across 2 runs x threads {{1, 4}}: {same}")
