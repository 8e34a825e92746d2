"""Approximate stochastic Newton inference for unregularized M-estimation.

The outer loop takes noisy Newton-like steps; each step's direction is found
by an inner SGD (or SVRG) solve whose Hessian-vector products are forward
finite differences of minibatch gradients. The averaged inner iterates,
rescaled, are replicates whose second moment estimates ``H^-1 G H^-1``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError, UsageError
from .model import Dataset, LossModel, make_rng

log = logging.getLogger(__name__)

DELTA_FLOOR = 1e-10
DIVERGENCE_FACTOR = 1e6
DENSE_ALPHA_LIMIT = 64


@dataclass(frozen=True)
class NewtonInferConfig:
    T: int = 100
    L: int = 200
    S_o: int = 10
    S_i: int = 10
    rho0: float = 0.1
    d_o: float = 2 / 3
    tau0: float = 1.0
    d_i: float = 2 / 3
    delta0: float = 0.01
    d_L: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for key in ("T", "L", "S_o", "S_i"):
            val = getattr(self, key)
            if isinstance(val, bool) or not isinstance(val, (int, np.integer)):
                raise ConfigError(f"expected an integer, got {val!r}", key)
            if val < 1:
                raise ConfigError("must be >= 1", key)
        for key in ("d_o", "d_i"):
            val = getattr(self, key)
            if not 0.5 < val < 1.0:
                raise ConfigError(f"must lie in (1/2, 1), got {val}", key)
        for key in ("rho0", "tau0", "delta0"):
            if not getattr(self, key) > 0:
                raise ConfigError("must be positive", key)
        if self.d_L < 0:
            raise ConfigError("must be >= 0", "d_L")

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return NewtonInferConfig(**d)


@dataclass(frozen=True, eq=False)
class Replicate:
    g_bar: np.ndarray
    rho_t: float
    scaled: np.ndarray


@dataclass(frozen=True, eq=False)
class InferenceRun:
    theta_trace: np.ndarray  # (T + 1, p)
    replicates: list
    config: NewtonInferConfig
    batch: int  # S_o, or the block length for time series
    block_starts: np.ndarray | None = None
    method: str = "sgd"
    outer_indices: np.ndarray | None = None  # (T, batch) sampled outer minibatches

    @property
    def T(self):
        return len(self.replicates)

    @property
    def theta_avg(self):
        return averaged_estimate(self)

    @property
    def theta_last(self):
        return self.theta_trace[-1]

    def scaled_matrix(self):
        return np.array([r.scaled for r in self.replicates])

    def same_as(self, other) -> bool:
        """Bitwise equality of traces and replicates."""
        return (
            np.array_equal(self.theta_trace, other.theta_trace)
            and len(self.replicates) == len(other.replicates)
            and all(
                np.array_equal(a.g_bar, b.g_bar) and a.rho_t == b.rho_t
                for a, b in zip(self.replicates, other.replicates)
            )
        )


# ---------------------------------------------------------------------------
# schedules


def outer_step(rho0: float, d_o: float, t: int) -> float:
    return rho0 * (t + 1) ** (-d_o)


def inner_step(tau0: float, d_i: float, j: int) -> float:
    return tau0 * (j + 1) ** (-d_i)


def hvp_delta(delta0: float, rho_t: float, tau_j: float) -> float:
    return max(delta0 * rho_t**4 * tau_j**4, DELTA_FLOOR)


def inner_iterations(L: int, d_L: float, t: int) -> int:
    """Inner loop length at outer step ``t``: ``ceil(L (t+1)^d_L)``."""
    if d_L == 0:
        return L
    return int(math.ceil(L * (t + 1) ** d_L - 1e-9))


# ---------------------------------------------------------------------------
# sampling


def sample_without_replacement(rng: np.random.Generator, n: int, k: int, rows: int) -> np.ndarray:
    """``rows`` independent uniform draws of ``k`` distinct indices from ``range(n)``."""
    if k > n:
        raise UsageError(f"cannot draw {k} distinct indices from {n}")
    if k == n:
        return np.tile(np.arange(n), (rows, 1))
    if k * k <= n:
        # ordered draws with replacement conditioned on distinctness are uniform
        out = rng.integers(0, n, size=(rows, k))
        while True:
            s = np.sort(out, axis=1)
            bad = np.flatnonzero((s[:, 1:] == s[:, :-1]).any(axis=1)) if k > 1 else np.empty(0, int)
            if bad.size == 0:
                return out
            out[bad] = rng.integers(0, n, size=(bad.size, k))
    keys = rng.random((rows, n))
    return np.argpartition(keys, k - 1, axis=1)[:, :k]


# ---------------------------------------------------------------------------
# inner solves


def _check_finite(vec, t, j):
    if not math.isfinite(float(vec.sum())):
        raise NumericError(f"non-finite inner iterate at outer step {t}, inner step {j}")


def _inner_sgd(loss, x, z, g0, rho_t, cfg, L_t, idx, t):
    """Inner SGD recursion; returns (g_bar, g_L)."""
    g = g0.copy()
    total = g0.copy()
    S_i = idx.shape[1]
    for j in range(L_t):
        tau = cfg.tau0 * (j + 1) ** (-cfg.d_i)
        delta = max(cfg.delta0 * (rho_t * tau) ** 4, DELTA_FLOOR)
        rows = idx[j]
        hv = loss.grad_diff(x[rows], z[rows], delta * g) / delta
        g = g - tau * hv + tau * g0
        _check_finite(g, t, j)
        total += g
    return total / (L_t + 1), g


def solve_newton_step_sgd(loss: LossModel, data: Dataset, theta_t, g0, t: int, cfg: NewtonInferConfig, rng, rho_t=None):
    """Approximately solve ``H g = g0`` by SGD with finite-difference HVPs.

    Returns ``(g_bar, g_L)``: the average of the ``L_t + 1`` inner iterates and
    the last one.
    """
    if cfg.S_i > data.n:
        raise ConfigError(f"S_i={cfg.S_i} exceeds n={data.n}", "S_i")
    rho_t = outer_step(cfg.rho0, cfg.d_o, t) if rho_t is None else rho_t
    L_t = inner_iterations(cfg.L, cfg.d_L, t)
    idx = sample_without_replacement(rng, data.n, cfg.S_i, L_t)
    theta_t = np.asarray(theta_t, dtype=float)
    z = data.x @ theta_t
    return _inner_sgd(loss, data.x, z, np.asarray(g0, dtype=float), rho_t, cfg, L_t, idx, t)


# ---------------------------------------------------------------------------
# outer loops


def _guard(theta, theta0, bound, t):
    if not np.isfinite(theta).all() or np.linalg.norm(theta - theta0) > bound:
        raise DivergenceError(
            f"outer iterate left the trust region at step {t}: ||theta_t - theta_0|| > {bound:.3g}"
        )


def _outer_loop(loss, data, theta0, cfg, draw_outer, scale, rho_schedule=None, method="sgd"):
    loss.validate(data)
    if cfg.S_i > data.n:
        raise ConfigError(f"S_i={cfg.S_i} exceeds n={data.n}", "S_i")
    rng = make_rng(cfg.seed, 0)
    x, y = data.x, data.y
    theta0 = np.array(theta0, dtype=float)
    bound = DIVERGENCE_FACTOR * (1.0 + np.linalg.norm(theta0))
    theta = theta0.copy()
    trace = [theta0.copy()]
    reps = []
    starts, drawn = [], []
    for t in range(cfg.T):
        rho = outer_step(cfg.rho0, cfg.d_o, t) if rho_schedule is None else rho_schedule(t)
        outer_idx, start = draw_outer(rng)
        starts.append(start)
        drawn.append(outer_idx)
        g0 = -rho * loss.mean_gradient(x[outer_idx], y[outer_idx], theta)
        L_t = inner_iterations(cfg.L, cfg.d_L, t)
        idx = sample_without_replacement(rng, data.n, cfg.S_i, L_t)
        g_bar, g_last = _inner_sgd(loss, x, x @ theta, g0, rho, cfg, L_t, idx, t)
        reps.append(Replicate(g_bar, rho, scale * g_bar / rho))
        theta = theta + g_last
        _guard(theta, theta0, bound, t)
        trace.append(theta.copy())
    blocks = np.array(starts) if method == "timeseries" else None
    return InferenceRun(np.array(trace), reps, cfg, int(round(scale * scale)), blocks, method, np.array(drawn))


def run_inference(
    loss: LossModel,
    data: Dataset,
    theta0=None,
    cfg: NewtonInferConfig = NewtonInferConfig(),
    rho_schedule: Callable[[int], float] | None = None,
) -> InferenceRun:
    """Run the approximate stochastic Newton inference loop.

    Parameters
    ----------
    theta0
        Starting point, which should already be close to the minimizer. When
        omitted, :func:`warm_start` supplies one.
    rho_schedule
        Optional replacement for the outer step schedule (for example a
        constant step in analytical checks).
    """
    if theta0 is None:
        theta0 = warm_start(loss, data, cfg)
    n, S_o = data.n, cfg.S_o

    def draw(rng):
        return rng.integers(0, n, size=S_o), -1

    return _outer_loop(loss, data, theta0, cfg, draw, math.sqrt(S_o), rho_schedule)


def svrg_defaults(loss: LossModel, data: Dataset, theta, alpha=None):
    """Step size ``1/(10 max beta_i)`` and inner length ``20 max beta_i / alpha``."""
    beta = float(np.max(loss.smoothness(data.x)))
    if alpha is None:
        if data.p > DENSE_ALPHA_LIMIT:
            raise ConfigError(f"alpha must be supplied when p > {DENSE_ALPHA_LIMIT}", "alpha")
        alpha = float(np.linalg.eigvalsh(loss.hessian(data.x, data.y, np.asarray(theta, float)))[0])
        if alpha <= 0:
            raise NumericError("Hessian at the starting point is not positive definite")
    return 1.0 / (10.0 * beta), int(math.ceil(20.0 * beta / alpha))


def _svrg_point_epoch(loss, x, y, theta, eta, inner_idx):
    d0 = -eta * loss.mean_gradient(x, y, theta)
    z = x @ theta
    d = d0.copy()
    total = d0.copy()
    for rows in inner_idx:
        d = d - eta * loss.grad_diff(x[rows], z[rows], d) + d0
        total += d
    return total / (len(inner_idx) + 1)


def warm_start(loss, data, cfg: NewtonInferConfig = NewtonInferConfig(), theta_init=None, epochs=5, alpha=None):
    """SVRG point estimate used as the default starting point.

    Runs only the point-estimation track of :func:`run_inference_svrg` with the
    step size and inner length from :func:`svrg_defaults`.
    """
    loss.validate(data)
    theta = np.zeros(data.p) if theta_init is None else np.array(theta_init, dtype=float)
    eta, L = svrg_defaults(loss, data, theta, alpha)
    rng = make_rng(cfg.seed, 1)
    S_i = min(cfg.S_i, data.n)
    for _ in range(epochs):
        idx = sample_without_replacement(rng, data.n, S_i, L)
        theta = theta + _svrg_point_epoch(loss, data.x, data.y, theta, eta, idx)
        if not np.isfinite(theta).all():
            raise DivergenceError("SVRG warm start diverged")
    return theta


def run_inference_svrg(loss: LossModel, data: Dataset, theta0=None, cfg: NewtonInferConfig = NewtonInferConfig(), eta=None, alpha=None) -> InferenceRun:
    """SVRG-based variant: same replicate stream, SVRG point-estimation track.

    Each outer step evaluates the full gradient once; the point track's inner
    loop shares the sampled minibatches with the replicate track.
    """
    loss.validate(data)
    if cfg.S_i > data.n:
        raise ConfigError(f"S_i={cfg.S_i} exceeds n={data.n}", "S_i")
    if theta0 is None:
        theta0 = warm_start(loss, data, cfg, alpha=alpha)
    theta0 = np.array(theta0, dtype=float)
    if eta is None:
        eta, L_needed = svrg_defaults(loss, data, theta0, alpha)
        if cfg.L < L_needed:
            log.info("inner length L=%d is below the SVRG guideline %d", cfg.L, L_needed)
    rng = make_rng(cfg.seed, 0)
    x, y = data.x, data.y
    bound = DIVERGENCE_FACTOR * (1.0 + np.linalg.norm(theta0))
    theta = theta0.copy()
    trace = [theta0.copy()]
    reps, drawn = [], []
    for t in range(cfg.T):
        rho = outer_step(cfg.rho0, cfg.d_o, t)
        d0 = -eta * loss.mean_gradient(x, y, theta)
        outer_idx = rng.integers(0, data.n, size=cfg.S_o)
        drawn.append(outer_idx)
        g0 = -rho * loss.mean_gradient(x[outer_idx], y[outer_idx], theta)
        L_t = inner_iterations(cfg.L, cfg.d_L, t)
        idx = sample_without_replacement(rng, data.n, cfg.S_i, L_t)
        z = x @ theta
        g, d = g0.copy(), d0.copy()
        g_tot, d_tot = g0.copy(), d0.copy()
        for j in range(L_t):
            rows = idx[j]
            xb, zb = x[rows], z[rows]
            d = d - eta * loss.grad_diff(xb, zb, d) + d0
            tau = cfg.tau0 * (j + 1) ** (-cfg.d_i)
            delta = max(cfg.delta0 * (rho * tau) ** 4, DELTA_FLOOR)
            hv = loss.grad_diff(xb, zb, delta * g) / delta
            g = g - tau * hv + tau * g0
            _check_finite(g, t, j)
            g_tot += g
            d_tot += d
        g_bar = g_tot / (L_t + 1)
        reps.append(Replicate(g_bar, rho, math.sqrt(cfg.S_o) * g_bar / rho))
        theta = theta + d_tot / (L_t + 1)
        _guard(theta, theta0, bound, t)
        trace.append(theta.copy())
    return InferenceRun(np.array(trace), reps, cfg, cfg.S_o, None, "svrg", np.array(drawn))


def averaged_estimate(run: InferenceRun) -> np.ndarray:
    """Average of the outer iterates ``theta_1 .. theta_T``."""
    if run.theta_trace.shape[0] < 2:
        raise UsageError("run has no outer iterations")
    return run.theta_trace[1:].mean(axis=0)


def write_replicates_csv(path, run: InferenceRun) -> None:
    p = run.theta_trace.shape[1]
    ts = run.block_starts is not None
    header = ["t", "rho_t"] + (["block_start"] if ts else []) + [f"g{j + 1}" for j in range(p)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, rep in enumerate(run.replicates):
            row = [str(t), format(rep.rho_t, ".17g")]
            if ts:
                row.append(str(int(run.block_starts[t])))
            w.writerow(row + [format(v, ".17g") for v in rep.scaled])
