"""Command-line entry point: ``python -m newton_infer <command> ...``.

Every command writes a ``manifest.json`` next to its outputs recording the
resolved configuration; ``rerun --manifest`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .approx_newton import NewtonInferConfig, run_inference, run_inference_svrg, write_replicates_csv
from .errors import ConfigError, NewtonInferError
from .highdim import HighDimConfig, debiased_estimator, fit_highdim, highdim_inference
from .inference import (
    confidence_intervals,
    covariance_from_run,
    exact_solver,
    plugin_sandwich_lowdim,
    z_test_pvalues,
)
from .model import read_dataset_csv
from .presets import ExperimentPreset, get_preset
from .simulation import METHODS, run_coverage
from .time_series import run_inference_timeseries

log = logging.getLogger("newton_infer")

COMMANDS = ("infer", "coverage", "highdim", "timeseries")
DEFAULT_PRESET = {"infer": "lin2", "coverage": "lin2", "highdim": "highdim-null-small", "timeseries": "tsma"}

# flag name -> engine config key
LOWDIM_FLAGS = {
    "T": "T", "L": "L", "S_o": "S_o", "S_i": "S_i", "rho0": "rho0", "tau0": "tau0",
    "d_o": "d_o", "d_i": "d_i", "delta0": "delta0", "d_L": "d_L",
}
HIGHDIM_FLAGS = {"lambda": "lam", "omega": "omega", "dense_limit": "dense_limit", "T": "T", "S_o": "S_o", "S_i": "S_i"}
RUN_KEYS = {"preset", "seed", "method", "sims", "lag", "level", "data", "oracle", "engine", "n"}


def _write_matrix_csv(path, m):
    m = np.atleast_2d(m)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"c{j + 1}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([format(float(v), ".17g") for v in row])


def _fmt(v):
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# configuration


def resolve_config(command: str, file_cfg: dict | None, flags: dict) -> dict:
    """Merge defaults, a JSON config and command-line flags (flags win).

    Returns a plain dict with keys from ``RUN_KEYS``; the ``engine`` entry
    holds validated engine overrides.
    """
    cfg = dict(file_cfg or {})
    unknown = set(cfg) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}", sorted(unknown)[0])
    engine = dict(cfg.pop("engine", {}) or {})
    for key, val in flags.items():
        if val is None:
            continue
        if key in RUN_KEYS:
            cfg[key] = val
        else:
            engine[key] = val
    preset = get_preset(cfg.get("preset") or DEFAULT_PRESET[command])
    cfg["preset"] = preset.name
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"expected an integer, got {cfg['seed']!r}", "seed")
    cfg.setdefault("level", 0.95)
    cfg.setdefault("oracle", False)
    if command == "timeseries":
        cfg.setdefault("method", "timeseries")
    cfg.setdefault("method", preset.method)
    if cfg["method"] not in METHODS[preset.kind]:
        raise ConfigError(f"method {cfg['method']!r} not available for preset {preset.name}", "method")
    if command == "coverage":
        cfg.setdefault("sims", preset.n_sims)
    valid = {f.name for f in fields(HighDimConfig if preset.kind == "highdim" else NewtonInferConfig)}
    bad = set(engine) - valid
    if bad:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(bad))}", "engine." + sorted(bad)[0])
    engine.pop("seed", None)
    merged = dict(preset.engine)
    merged.update(engine)
    # validates types and ranges
    preset.with_overrides(engine=engine).engine_config(cfg["seed"])
    cfg["engine"] = merged
    return cfg


def _preset_from(cfg) -> ExperimentPreset:
    preset = get_preset(cfg["preset"])
    changes = {"engine": cfg["engine"]}
    if cfg.get("lag") is not None:
        changes["lag"] = int(cfg["lag"])
    if cfg.get("n") is not None:
        changes["n"] = int(cfg["n"])
    return preset.with_overrides(**changes)


def _load_data(preset, cfg):
    if cfg.get("data"):
        return read_dataset_csv(cfg["data"])
    return preset.generate((cfg["seed"], 0, 0))


# ---------------------------------------------------------------------------
# commands


def cmd_infer(cfg: dict, out: Path) -> list:
    preset = _preset_from(cfg)
    if preset.kind == "highdim":
        raise ConfigError("use the highdim command for high-dimensional presets", "preset")
    data = _load_data(preset, cfg)
    loss = preset.loss()
    ecfg = preset.engine_config(cfg["seed"])
    method = cfg["method"]
    outputs = []
    if method == "oracle":
        center = exact_solver(loss, data)
        cov = plugin_sandwich_lowdim(loss, data, center)
    else:
        if method == "svrg":
            run = run_inference_svrg(loss, data, None, ecfg)
        elif method == "timeseries":
            run = run_inference_timeseries(loss, data, None, ecfg, preset.lag)
        else:
            run = run_inference(loss, data, None, ecfg)
        center = run.theta_avg
        cov = covariance_from_run(run)
        write_replicates_csv(out / "replicates.csv", run)
        outputs.append("replicates.csv")
    ci = confidence_intervals(center, cov, data.n, cfg["level"])
    ci.write_csv(out / "intervals.csv")
    _write_matrix_csv(out / "covariance.csv", cov.matrix)
    outputs += ["intervals.csv", "covariance.csv"]
    if cfg["oracle"] and method != "oracle":
        theta_hat = exact_solver(loss, data)
        _write_matrix_csv(out / "oracle_covariance.csv", plugin_sandwich_lowdim(loss, data, theta_hat).matrix)
        outputs.append("oracle_covariance.csv")
    return outputs


def cmd_coverage(cfg: dict, out: Path, parallel=None) -> list:
    preset = _preset_from(cfg)
    report = run_coverage(preset, int(cfg["sims"]), cfg["seed"], cfg["method"], parallel, cfg["level"])
    (out / "coverage.json").write_text(report.to_json())
    outputs = ["coverage.json"]
    if report.null_pvalues:
        with (out / "null_pvalues.csv").open("w", newline="") as fh:
            fh.write("pvalue\n")
            fh.writelines(_fmt(v) + "\n" for v in report.null_pvalues)
        outputs.append("null_pvalues.csv")
    return outputs


def cmd_highdim(cfg: dict, out: Path) -> list:
    preset = _preset_from(cfg)
    if preset.kind != "highdim":
        raise ConfigError("highdim command needs a high-dimensional preset", "preset")
    data = _load_data(preset, cfg)
    ecfg = preset.engine_config(cfg["seed"])
    fit = fit_highdim(data, ecfg)
    deb = fit.debiased
    var = deb.variance * data.n
    outputs = []
    if cfg["method"] == "newton":
        run, _ = highdim_inference(data, fit.cov, fit.lam, ecfg, theta0=fit.theta_hat)
        var = covariance_from_run(run).diagonal()
        write_replicates_csv(out / "replicates.csv", run)
        outputs.append("replicates.csv")
    se = np.sqrt(var / data.n)
    pvals = z_test_pvalues(deb.theta_d, 0.0, var, data.n)
    with (out / "debiased.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["coord", "theta_hat", "theta_d", "se", "z", "pvalue"])
        for j in range(data.p):
            z = deb.theta_d[j] / se[j] if se[j] > 0 else 0.0
            w.writerow([j + 1, _fmt(fit.theta_hat[j]), _fmt(deb.theta_d[j]), _fmt(se[j]), _fmt(z), _fmt(pvals[j])])
    outputs.append("debiased.csv")
    if fit.cov.is_dense and cfg["oracle"]:
        alt = debiased_estimator(data, fit.theta_hat, fit.cov, "svrg", ecfg)
        gap = float(np.max(np.abs(alt.theta_d - deb.theta_d)))
        log.info("de-bias exact vs SVRG max difference %.3g", gap)
        (out / "debias_check.json").write_text(json.dumps({"max_abs_difference": gap}, indent=2) + "\n")
        outputs.append("debias_check.json")
    (out / "hyperparameters.json").write_text(
        json.dumps({"lambda": fit.lam, "omega": fit.omega}, indent=2, sort_keys=True) + "\n"
    )
    outputs.append("hyperparameters.json")
    return outputs


def execute(command: str, cfg: dict, out: Path, parallel=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if command in ("infer", "timeseries"):
        outputs = cmd_infer(cfg, out)
    elif command == "coverage":
        outputs = cmd_coverage(cfg, out, parallel)
    elif command == "highdim":
        outputs = cmd_highdim(cfg, out)
    else:
        raise ConfigError(f"unknown command {command!r}", "command")
    manifest = {
        "command": command,
        "preset": cfg["preset"],
        "config": cfg,
        "seed": cfg["seed"],
        "version": __version__,
        "outputs": sorted(outputs),
        "parallel": parallel,
        "wall_time": time.perf_counter() - start,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p):
    p.add_argument("--preset")
    p.add_argument("--config", type=Path, help="JSON file with run keys and an 'engine' table")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--parallel", type=int, default=None)
    p.add_argument("--oracle", action="store_true", default=None)
    p.add_argument("--method")
    p.add_argument("--level", type=float)
    p.add_argument("--data", help="dataset CSV with header x1..xp,y")
    p.add_argument("--n", type=int, help="override the preset sample size")
    p.add_argument("--lag", type=int)
    for flag in ("T", "L", "S-o", "S-i"):
        p.add_argument(f"--{flag}", type=int, dest=flag.replace("-", "_"))
    for flag in ("rho0", "tau0", "d-o", "d-i", "delta0", "d-L"):
        p.add_argument(f"--{flag}", type=float, dest=flag.replace("-", "_"))
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--omega", type=float)
    p.add_argument("--dense-limit", type=int, dest="dense_limit")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="newton-infer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "coverage":
            p.add_argument("--sims", type=int)
    p = sub.add_parser("rerun")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("--parallel", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


_SKIP = {"command", "config", "out", "parallel", "verbose"}


def _flags_from(args, highdim: bool):
    flags = {}
    for key, val in vars(args).items():
        if key in _SKIP or val is None:
            continue
        flags[key] = val
    if not highdim:
        if flags.get("lam") is not None or flags.get("omega") is not None:
            raise ConfigError("--lambda/--omega only apply to high-dimensional presets", "lambda")
    return flags


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            manifest = json.loads(args.manifest.read_text())
            out = args.out or args.manifest.parent
            parallel = args.parallel if args.parallel is not None else manifest.get("parallel")
            execute(manifest["command"], manifest["config"], out, parallel)
            return 0
        file_cfg = json.loads(args.config.read_text()) if args.config else {}
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object", "config")
        preset_name = args.preset or file_cfg.get("preset") or DEFAULT_PRESET[args.command]
        highdim = get_preset(preset_name).kind == "highdim"
        cfg = resolve_config(args.command, file_cfg, _flags_from(args, highdim))
        execute(args.command, cfg, args.out, args.parallel)
        return 0
    except NewtonInferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
