"""Monte Carlo coverage harness for the synthetic presets."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .approx_newton import run_inference, run_inference_svrg
from .errors import ConfigError, NewtonInferError, PartialFailureError
from .highdim import fit_highdim, highdim_inference
from .inference import (
    CovarianceEstimate,
    confidence_intervals,
    covariance_from_run,
    exact_solver,
    plugin_sandwich_lowdim,
    z_test_pvalues,
)
from .presets import ExperimentPreset, get_preset
from .time_series import HacWeighting, default_lag, newey_west, run_inference_timeseries

log = logging.getLogger(__name__)

FAILURE_THRESHOLD = 0.10
METHODS = {
    "linear": ("sgd", "svrg", "oracle"),
    "logistic": ("sgd", "svrg", "oracle"),
    "mean": ("sgd", "svrg", "oracle"),
    "timeseries": ("timeseries", "sgd", "oracle"),
    "highdim": ("debias", "newton"),
}


def child_seed(master_seed: int, index: int) -> int:
    """64-bit engine seed for simulation ``index``."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True, eq=False)
class SimOutcome:
    index: int
    covered: np.ndarray | None = None
    lengths: np.ndarray | None = None
    pvalues: np.ndarray | None = None
    error: str | None = None


@dataclass(frozen=True)
class CoverageReport:
    preset: str
    method: str
    n_sims: int
    coverage: float
    avg_length: float
    failures: int
    seed: int
    level: float = 0.95
    null_pvalues: tuple = field(default=(), repr=False)

    def to_dict(self):
        return {
            "preset": self.preset,
            "method": self.method,
            "n_sims": self.n_sims,
            "coverage": self.coverage,
            "avg_length": self.avg_length,
            "failures": self.failures,
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def estimate_intervals(preset: ExperimentPreset, data, method: str, seed: int, level=0.95):
    """Center, covariance (scaled by ``n``) and intervals for one dataset."""
    loss = preset.loss()
    kind = preset.kind
    if kind == "highdim":
        cfg = preset.engine_config(seed)
        fit = fit_highdim(data, cfg)
        center = fit.debiased.theta_d
        if method == "debias":
            cov = fit.debiased.variance * data.n
        else:
            run, _ = highdim_inference(data, fit.cov, fit.lam, cfg, theta0=fit.theta_hat)
            cov = covariance_from_run(run).diagonal()
        return center, cov, confidence_intervals(center, cov, data.n, level)
    cfg = preset.engine_config(seed)
    if method == "oracle":
        center = exact_solver(loss, data)
        if kind == "timeseries":
            h = loss.hessian(data.x, data.y, center)
            g = newey_west(loss.gradients(data.x, data.y, center), preset.lag or default_lag(data.n), HacWeighting.BARTLETT)
            hinv = np.linalg.inv(h)
            cov = CovarianceEstimate(hinv @ g @ hinv, "newey_west")
        else:
            cov = plugin_sandwich_lowdim(loss, data, center)
    else:
        if method == "sgd":
            run = run_inference(loss, data, None, cfg)
        elif method == "svrg":
            run = run_inference_svrg(loss, data, None, cfg)
        elif method == "timeseries":
            run = run_inference_timeseries(loss, data, None, cfg, preset.lag)
        else:
            raise ConfigError(f"unknown method {method!r}", "method")
        center = run.theta_avg
        cov = covariance_from_run(run)
    return center, cov, confidence_intervals(center, cov, data.n, level)


def simulate_one(preset: ExperimentPreset, index: int, master_seed: int, method: str, level=0.95) -> SimOutcome:
    try:
        data = preset.generate((int(master_seed), int(index), 0))
        center, cov, ci = estimate_intervals(preset, data, method, child_seed(master_seed, index), level)
        truth = preset.truth()
        pvals = None
        if preset.kind == "highdim":
            off = truth == 0
            pvals = z_test_pvalues(center[off], 0.0, cov[off] if np.ndim(cov) == 1 else np.diag(cov)[off], data.n)
        return SimOutcome(index, ci.covers(truth), ci.length, pvals)
    except (NewtonInferError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.warning("simulation %d failed: %s", index, exc)
        return SimOutcome(index, error=f"{type(exc).__name__}: {exc}")


def _simulate_chunk(args):
    preset, indices, master_seed, method, level = args
    return [simulate_one(preset, i, master_seed, method, level) for i in indices]


def _worker_count(parallel):
    if parallel is None:
        parallel = int(os.environ.get("NEWTON_INFER_THREADS", "1"))
    return max(1, int(parallel))


def run_coverage(preset, n_sims: int, master_seed: int = 0, method: str | None = None, parallel: int | None = 1, level=0.95, allow_partial=False) -> CoverageReport:
    """Coverage and average interval length over ``n_sims`` synthetic datasets.

    Each simulation derives its data and engine streams from
    ``(master_seed, index)``, and results are reduced in index order, so the
    report does not depend on ``parallel``. Failed simulations are excluded;
    more than 10% failures raises :class:`PartialFailureError` unless
    ``allow_partial`` is set.
    """
    if isinstance(preset, str):
        preset = get_preset(preset)
    method = method or preset.method
    if method not in METHODS[preset.kind]:
        raise ConfigError(f"method {method!r} not available for {preset.kind} presets", "method")
    if n_sims < 1:
        raise ConfigError("must be >= 1", "n_sims")
    workers = min(_worker_count(parallel), n_sims)
    if workers == 1:
        outcomes = _simulate_chunk((preset, range(n_sims), master_seed, method, level))
    else:
        chunks = [(preset, range(k, n_sims, workers), master_seed, method, level) for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, chunks))
        outcomes = sorted((o for part in parts for o in part), key=lambda o: o.index)
    good = [o for o in outcomes if o.error is None]
    failures = len(outcomes) - len(good)
    if good:
        covered = np.concatenate([o.covered for o in good])
        lengths = np.concatenate([o.lengths for o in good])
        coverage, avg_len = float(covered.mean()), float(lengths.mean())
    else:
        coverage = avg_len = math.nan
    pvals = tuple(float(v) for o in good if o.pvalues is not None for v in o.pvalues)
    report = CoverageReport(preset.name, method, n_sims, coverage, avg_len, failures, int(master_seed), level, pvals)
    if failures > FAILURE_THRESHOLD * n_sims and not allow_partial:
        first = next(o.error for o in outcomes if o.error is not None)
        err = PartialFailureError(f"{failures} of {n_sims} simulations failed (first: {first})")
        err.report = report
        raise err
    return report
