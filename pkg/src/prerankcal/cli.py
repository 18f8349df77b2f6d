"""prerankcal command line: simulate | train | evaluate | nulldist.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure. Errors
print one line ``prerankcal: error code=<n> kind=<Exception> msg=<text>``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
import tempfile
import time
import warnings
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .autodiff import AutodiffError
from .data import DataError, correlated_noise_regression, from_arrays, linear_gaussian, load_dataset
from .diagnostics import CalibrationReport, QuantileGrid, build_report, null_distribution
from .model import dump_checkpoint, load_checkpoint
from .numerics import NumericsError, RngStream
from .preranks import PreRankError
from .scenarios import ExpCovSpec, MisspecSpec, ScenarioError, run_simulation
from .training import _EVAL, NonFiniteLoss, TrainConfig, TrainingError, evaluate, select_lambda, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ io helpers

def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON (line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    # a manifest replays its resolved config
    if "manifest_version" in cfg:
        cfg = dict(cfg["config"])
    return cfg


def _pop(cfg: dict, key, default=None, kind=None):
    val = cfg.pop(key, default)
    if kind is not None and val is not None:
        try:
            val = kind(val)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} has invalid value {val!r}") from None
    return val


def _versions() -> dict:
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "artifact": pkg}


class Run:
    """Output directory with a manifest written before any compute."""

    def __init__(self, command: str, config: dict, seed: int, out: Path, outputs: list):
        self.out = Path(out)
        self.t0 = time.time()
        self.manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "config": config,
            "seed": seed,
            "versions": _versions(),
            "outputs": sorted(outputs),
            "started_unix": self.t0,
        }
        self.write("manifest.json", _json(self.manifest))

    def write(self, name: str, text: str) -> None:
        atomic_write(self.out / name, text)

    def finish(self) -> None:
        self.manifest["elapsed_seconds"] = time.time() - self.t0
        self.write("manifest.json", _json(self.manifest))


def _limit_blas():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=1)


# ------------------------------------------------------------------ simulate

SIM_DEFAULT_PRERANKS = ["marg", "loc", "scale", "dep:1", "hdr", "pca:1"]


def _resolve_simulation(cfg: dict, seed) -> dict:
    cfg = dict(cfg)
    spec = {
        "kind": _pop(cfg, "kind", "index", str),
        "dim": _pop(cfg, "dim", 10, int),
        "rows": _pop(cfg, "rows", 5, int),
        "cols": _pop(cfg, "cols", 5, int),
        "sigma2": _pop(cfg, "sigma2", 1.0, float),
        "length": _pop(cfg, "length", 1.0, float),
        "axis_scale": _pop(cfg, "axis_scale", 1.0, float),
    }
    mis = _pop(cfg, "misspec", {"kind": "none", "params": {}})
    if not isinstance(mis, dict):
        raise ConfigError("misspec must be an object with kind and params")
    out = {
        **spec,
        "misspec": {"kind": str(mis.get("kind", "none")), "params": dict(mis.get("params", {}))},
        "N": _pop(cfg, "N", 10_000, int),
        "M": _pop(cfg, "M", 20, int),
        "seed": _pop(cfg, "seed", 0, int),
        "preranks": list(_pop(cfg, "preranks", SIM_DEFAULT_PRERANKS)),
        "B": _pop(cfg, "B", 5000, int),
        "grid_size": _pop(cfg, "grid_size", 100, int),
        "n_ref": _pop(cfg, "n_ref", 200, int),
        "pca_source": _pop(cfg, "pca_source", "analytic", str),
        "null_discretization": _pop(cfg, "null_discretization", "ensemble", str),
    }
    if cfg:
        raise ConfigError(f"unknown simulate config keys: {sorted(cfg)}")
    if seed is not None:
        out["seed"] = int(seed)
    return out


def cmd_simulate(cfg: dict, seed, out: Path, threads: int) -> int:
    rc = _resolve_simulation(cfg, seed)
    spec = ExpCovSpec(**{k: rc[k] for k in ("kind", "dim", "rows", "cols", "sigma2", "length", "axis_scale")})
    mis = MisspecSpec(rc["misspec"]["kind"], rc["misspec"]["params"])
    names = [n.replace(":", "_") for n in rc["preranks"]]
    run = Run("simulate", rc, rc["seed"], out,
              ["report.json", "null.csv"] + [f"pits_{n}.csv" for n in names])
    sim = run_simulation(spec, mis, rc["N"], rc["M"], rc["preranks"], rng=RngStream(rc["seed"], (0,)),
                         workers=threads, n_ref=rc["n_ref"], pca_source=rc["pca_source"])
    disc = rc["M"] if rc["null_discretization"] == "ensemble" else None
    grid = QuantileGrid.uniform(rc["grid_size"])
    null = null_distribution(rc["N"], grid, rc["B"], disc, rng=RngStream(rc["seed"], (1,)), workers=threads)
    report = build_report(sim.pits, rc["N"], grid, disc, null=null)
    _write_report(run, report, rc["B"], rc["N"], disc)
    run.write("null.csv", _csv(["pce"], [[v] for v in null.statistics]))
    run.finish()
    return EXIT_OK


def _write_report(run: Run, report: CalibrationReport, b, n, disc, name="report.json"):
    for e in report.entries:
        run.write(f"pits_{e.prerank.replace(':', '_')}.csv", _csv(["pit"], [[v] for v in e.pits]))
    doc = {"null": {"B": b, "n": n, "discretization": disc}, "preranks": report.to_json_obj()}
    run.write(name, _json(doc))


# ------------------------------------------------------------------ data / train

def _load_data(dcfg: dict):
    if not isinstance(dcfg, dict):
        raise ConfigError("data must be an object")
    dcfg = dict(dcfg)
    split = tuple(dcfg.pop("split", (0.8, 0.1, 0.1)))
    seed = int(dcfg.pop("seed", 0))
    synth = dcfg.pop("synthetic", None)
    if synth is not None:
        n = int(dcfg.pop("n", 2000))
        if dcfg:
            raise ConfigError(f"unknown data keys: {sorted(dcfg)}")
        if synth == "correlated_noise":
            x, y = correlated_noise_regression(n, seed)
        elif synth == "linear_gaussian":
            x, y = linear_gaussian(n, seed)
        else:
            raise ConfigError(f"unknown synthetic dataset {synth!r}")
        return from_arrays(x, y, fractions=split, seed=seed)
    if "path" not in dcfg or "target_cols" not in dcfg:
        raise ConfigError("data needs either 'synthetic' or 'path' and 'target_cols'")
    path = dcfg.pop("path")
    targets = dcfg.pop("target_cols")
    feats = dcfg.pop("feature_cols", None)
    if dcfg:
        raise ConfigError(f"unknown data keys: {sorted(dcfg)}")
    if not os.path.exists(path):
        raise DataError(f"data file {path} not found")
    return load_dataset(path, targets, split, seed, feats)


def _resolve_train(cfg: dict, seed) -> dict:
    cfg = dict(cfg)
    if "data" not in cfg:
        raise ConfigError("train config needs a 'data' section")
    tcfg = dict(cfg.pop("train", {}))
    if seed is not None:
        tcfg["seed"] = int(seed)
    try:
        tc = TrainConfig.from_dict(tcfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    out = {
        "data": cfg.pop("data"),
        "train": tc.to_dict(),
        "lambda_grid": cfg.pop("lambda_grid", None),
        "B": int(cfg.pop("B", 5000)),
    }
    if cfg:
        raise ConfigError(f"unknown train config keys: {sorted(cfg)}")
    return out


def cmd_train(cfg: dict, seed, out: Path, threads: int) -> int:
    rc = _resolve_train(cfg, seed)
    tc = TrainConfig.from_dict(rc["train"])
    outputs = ["checkpoint.json", "trace.csv"] + (["selection.json"] if rc["lambda_grid"] else [])
    ds = _load_data(rc["data"])
    run = Run("train", rc, tc.seed, out, outputs)
    if rc["lambda_grid"]:
        sel = select_lambda(ds.train, ds.val, tc, rc["lambda_grid"], workers=threads)
        model = sel.models[sel.chosen]
        run.write("selection.json", _json(sel.to_dict()))
    else:
        model = train(ds.train, ds.val, tc)
    extra = {"train": model.cfg.to_dict(), "data": rc["data"]}
    run.write("checkpoint.json", dump_checkpoint(model.net, model.params, extra) + "\n")
    run.write("trace.csv", _trace_csv(model.trace, tc.preranks))
    run.finish()
    return EXIT_OK


def _trace_csv(trace, preranks) -> str:
    cols = ["epoch", "train_loss", "val_nll"] + [f"val_pce_{p}" for p in preranks] + ["val_es"]
    rows = [[r.get(c, "") for c in cols] for r in trace]
    return _csv(cols, rows)


# ------------------------------------------------------------------ evaluate

def cmd_evaluate(cfg: dict, seed, out: Path, threads: int, checkpoint: str, split: str) -> int:
    if checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint")
    try:
        text = Path(checkpoint).read_text()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    try:
        net, params, extra = load_checkpoint(text)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed checkpoint {checkpoint}: {exc}") from None
    tc = TrainConfig.from_dict(extra.get("train", {}))
    cfg = dict(cfg)
    data_cfg = cfg.pop("data", extra.get("data"))
    preranks = list(cfg.pop("preranks", tc.preranks))
    b = int(cfg.pop("B", 5000))
    cfg.pop("train", None)
    cfg.pop("lambda_grid", None)
    if cfg:
        raise ConfigError(f"unknown evaluate config keys: {sorted(cfg)}")
    eval_seed = tc.seed if seed is None else int(seed)
    rc = {"data": data_cfg, "preranks": preranks, "B": b, "split": split, "checkpoint": str(checkpoint),
          "eval_seed": eval_seed}
    ds = _load_data(data_cfg)
    if split not in ds.splits:
        raise ConfigError(f"unknown split {split!r}")
    part = ds.split(split)
    if net.input_dim != part.x.shape[1] or net.output_dim != part.y.shape[1]:
        raise DataError("checkpoint dimensions do not match the dataset")
    run = Run("evaluate", rc, eval_seed, out, ["report.json"] + [f"pits_{p.replace(':', '_')}.csv" for p in preranks])
    res = evaluate(net, params, part, preranks, tc.eval_m, RngStream(eval_seed).spawn(_EVAL), tc.n_ref, tc.tau_cop,
                   QuantileGrid.uniform(tc.grid_size))
    report = build_report(res.pits, len(part), QuantileGrid.uniform(tc.grid_size), tc.eval_m, b,
                          rng=RngStream(eval_seed, (5,)), workers=threads, nll=res.nll, es=res.energy_score)
    _write_report(run, report, b, len(part), tc.eval_m)
    run.finish()
    return EXIT_OK


# ------------------------------------------------------------------ nulldist

def cmd_nulldist(cfg: dict, seed, out: Path, threads: int, args) -> int:
    cfg = dict(cfg)
    rc = {
        "n": _pop(cfg, "n", 10_000, int),
        "grid_size": _pop(cfg, "grid_size", 100, int),
        "B": _pop(cfg, "B", 50_000, int),
        "M": _pop(cfg, "M", None, int),
        "seed": _pop(cfg, "seed", 0, int),
    }
    if cfg:
        raise ConfigError(f"unknown nulldist config keys: {sorted(cfg)}")
    for key, val in (("n", args.n), ("grid_size", args.grid_size), ("B", args.B), ("M", args.M)):
        if val is not None:
            rc[key] = val
    if seed is not None:
        rc["seed"] = int(seed)
    if rc["n"] < 1 or rc["B"] < 1 or rc["grid_size"] < 1 or (rc["M"] is not None and rc["M"] < 1):
        raise ConfigError("n, B, grid_size and M must be positive")
    run = Run("nulldist", rc, rc["seed"], out, ["null.csv", "quantiles.csv"])
    null = null_distribution(rc["n"], QuantileGrid.uniform(rc["grid_size"]), rc["B"], rc["M"],
                             rng=RngStream(rc["seed"], (1,)), workers=threads)
    qs = [0.5, 0.9, 0.95, 0.99]
    run.write("null.csv", _csv(["pce"], [[v] for v in null.statistics]))
    run.write("quantiles.csv", _csv(["q", "pce"], [[q, float(null.quantile(q))] for q in qs]))
    run.finish()
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (or a manifest.json to replay)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker processes")

    p = argparse.ArgumentParser(prog="prerankcal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run a Gaussian simulation scenario")
    sub.add_parser("train", parents=[common], help="train a mixture hypernetwork")
    ev = sub.add_parser("evaluate", parents=[common], help="calibration report for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    nd = sub.add_parser("nulldist", parents=[common], help="null distribution of the PCE")
    nd.add_argument("--n", type=int)
    nd.add_argument("--grid-size", type=int, dest="grid_size")
    nd.add_argument("--B", type=int)
    nd.add_argument("--M", type=int, help="ensemble size for discretized PITs")
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"prerankcal: error code={code} kind={type(exc).__name__} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _fail(EXIT_CONFIG, ConfigError("--threads must be >= 1"))
    out = Path(args.out)
    limiter = _limit_blas()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            cfg = _read_config(args.config)
            if args.command == "simulate":
                return cmd_simulate(cfg, args.seed, out, args.threads)
            if args.command == "train":
                return cmd_train(cfg, args.seed, out, args.threads)
            if args.command == "evaluate":
                return cmd_evaluate(cfg, args.seed, out, args.threads, args.checkpoint, args.split)
            return cmd_nulldist(cfg, args.seed, out, args.threads, args)
    except (NonFiniteLoss, NumericsError, AutodiffError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (DataError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except (ConfigError, ScenarioError, TrainingError, PreRankError, KeyError, TypeError, ValueError) as exc:
        return _fail(EXIT_CONFIG, exc)
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
