"""Covariance assembly, intervals and tests, and dense low-dimensional oracles."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, SingularMatrixError, UsageError
from .model import Dataset, LossModel, SquaredLoss

log = logging.getLogger(__name__)

DENSE_ORACLE_LIMIT = 512

# rational approximation of the standard normal quantile (Acklam)
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02, 1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02, 6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00, -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x):
    """Standard normal CDF via ``erfc``."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_sf(x):
    """Upper tail ``1 - Phi(x)`` without cancellation for large ``x``."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def normal_quantile(q: float) -> float:
    """Inverse standard normal CDF.

    Rational approximation (relative error about 1e-9) refined by one Halley
    step on the CDF.
    """
    if not 0.0 < q < 1.0:
        if q == 0.0:
            return -math.inf
        if q == 1.0:
            return math.inf
        raise UsageError(f"probability must lie in [0, 1], got {q}")
    if q < _P_LOW:
        r = math.sqrt(-2.0 * math.log(q))
        x = (((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / (
            (((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0
        )
    elif q <= 1.0 - _P_LOW:
        r = q - 0.5
        s = r * r
        x = (((((_A[0] * s + _A[1]) * s + _A[2]) * s + _A[3]) * s + _A[4]) * s + _A[5]) * r / (
            ((((_B[0] * s + _B[1]) * s + _B[2]) * s + _B[3]) * s + _B[4]) * s + 1.0
        )
    else:
        r = math.sqrt(-2.0 * math.log1p(-q))
        x = -(((((_C[0] * r + _C[1]) * r + _C[2]) * r + _C[3]) * r + _C[4]) * r + _C[5]) / (
            (((_D[0] * r + _D[1]) * r + _D[2]) * r + _D[3]) * r + 1.0
        )
    # Halley refinement; use the tail closer to q for accuracy
    e = normal_cdf(x) - q if q < 0.5 else (1.0 - q) - normal_sf(x)
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    matrix: np.ndarray
    source: str  # "replicates", "plugin_sandwich", "newey_west", "plugin_highdim"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise UsageError(f"covariance must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)

    @property
    def p(self):
        return self.matrix.shape[0]

    def diagonal(self):
        return np.diag(self.matrix).copy()


def _diag_of(cov):
    if isinstance(cov, CovarianceEstimate):
        return cov.diagonal()
    a = np.asarray(cov, dtype=float)
    return np.diag(a).copy() if a.ndim == 2 else a.copy()


def _clamped_diag(cov):
    diag = _diag_of(cov)
    if np.any(diag < 0):
        warnings.warn(f"clamping {int(np.sum(diag < 0))} negative variance(s) to zero", RuntimeWarning, stacklevel=3)
        diag = np.maximum(diag, 0.0)
    return diag


def covariance_from_replicates(replicates, S_o: int) -> CovarianceEstimate:
    """``(S_o / T) sum_t (g_bar_t / rho_t)(g_bar_t / rho_t)^T``."""
    if len(replicates) == 0:
        raise UsageError("no replicates")
    g = np.array([r.g_bar / r.rho_t for r in replicates])
    m = S_o * (g.T @ g) / len(replicates)
    return CovarianceEstimate(0.5 * (m + m.T), "replicates", {"T": len(replicates), "S_o": S_o})


def covariance_from_run(run) -> CovarianceEstimate:
    """Replicate covariance using the run's batch size (or block length)."""
    est = covariance_from_replicates(run.replicates, run.batch)
    cfg = run.config
    est.meta.update({"L": getattr(cfg, "L", None), "method": run.method})
    return est


def plugin_sandwich_lowdim(loss: LossModel, data: Dataset, theta_hat) -> CovarianceEstimate:
    """Dense plug-in sandwich ``H^-1 G H^-1`` at ``theta_hat``."""
    if data.p > DENSE_ORACLE_LIMIT:
        raise UsageError(f"dense oracle limited to p <= {DENSE_ORACLE_LIMIT}")
    theta_hat = np.asarray(theta_hat, dtype=float)
    h = loss.hessian(data.x, data.y, theta_hat)
    grads = loss.gradients(data.x, data.y, theta_hat)
    g = grads.T @ grads / data.n
    lo = float(np.linalg.eigvalsh(h)[0])
    if lo <= 1e-14 * max(1.0, float(np.abs(h).max())):
        raise SingularMatrixError(f"Hessian is singular (smallest eigenvalue {lo:.3g})")
    hinv_g = np.linalg.solve(h, g)
    m = np.linalg.solve(h, hinv_g.T)
    return CovarianceEstimate(0.5 * (m + m.T), "plugin_sandwich", {"n": data.n})


def exact_solver(loss: LossModel, data: Dataset, theta0=None, tol=1e-10, max_iter=100) -> np.ndarray:
    """Dense reference minimizer of the empirical risk.

    Squared loss uses one normal-equations solve; other losses use damped
    Newton iterations until the mean-gradient norm is at most ``tol``.

    Raises
    ------
    SingularMatrixError
        The Hessian degenerates, as happens when logistic data are separable.
    NumericError
        No convergence within ``max_iter`` iterations.
    """
    if data.p > DENSE_ORACLE_LIMIT:
        raise UsageError(f"dense oracle limited to p <= {DENSE_ORACLE_LIMIT}")
    loss.validate(data)
    x, y = data.x, data.y
    scale = max(float(np.linalg.eigvalsh(x.T @ x / data.n)[-1]), 1e-300)
    theta = np.zeros(data.p) if theta0 is None else np.array(theta0, dtype=float)
    if isinstance(loss, SquaredLoss):
        h = x.T @ x / data.n
        if float(np.linalg.eigvalsh(h)[0]) <= 1e-12 * scale:
            raise SingularMatrixError("design matrix is rank deficient")
        theta = np.linalg.solve(h, x.T @ y / data.n)
        # one refinement step against rounding
        theta -= np.linalg.solve(h, loss.mean_gradient(x, y, theta))
        return theta
    for _ in range(max_iter):
        grad = loss.mean_gradient(x, y, theta)
        if np.linalg.norm(grad) <= tol:
            return theta
        h = loss.hessian(x, y, theta)
        lo = float(np.linalg.eigvalsh(h)[0])
        if lo <= 1e-8 * scale:
            raise SingularMatrixError(
                f"Hessian degenerates (smallest eigenvalue {lo:.3g}); coefficients diverge, data may be separable"
            )
        step = np.linalg.solve(h, grad)
        f0 = float(np.mean(loss.values(x, y, theta)))
        s = 1.0
        while s > 1e-8:
            cand = theta - s * step
            if float(np.mean(loss.values(x, y, cand))) <= f0 + 1e-12 * abs(f0):
                break
            s *= 0.5
        theta = cand
        if not np.isfinite(theta).all():
            raise NumericError("Newton iterate is not finite")
    if np.linalg.norm(loss.mean_gradient(x, y, theta)) <= tol:
        return theta
    raise NumericError(f"Newton solver did not converge in {max_iter} iterations")


@dataclass(frozen=True, eq=False)
class ConfidenceIntervals:
    lower: np.ndarray
    upper: np.ndarray
    level: float
    center: np.ndarray

    @property
    def length(self):
        return self.upper - self.lower

    def covers(self, truth, slack=1e-12):
        """Coordinate-wise containment, allowing ``slack * (1 + |truth|)`` for rounding."""
        truth = np.asarray(truth, dtype=float)
        tol = slack * (1.0 + np.abs(truth))
        return (self.lower - tol <= truth) & (truth <= self.upper + tol)

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coord", "center", "lower", "upper"])
            for j in range(len(self.center)):
                w.writerow([j + 1] + [format(float(v), ".17g") for v in (self.center[j], self.lower[j], self.upper[j])])


def confidence_intervals(center, cov, n: int, level: float = 0.95) -> ConfidenceIntervals:
    """Normal intervals ``center_j +- z sqrt(cov_jj / n)``.

    ``cov`` may be a :class:`CovarianceEstimate`, a matrix or a vector of
    variances.
    """
    if not 0.0 <= level < 1.0:
        raise UsageError(f"level must lie in [0, 1), got {level}")
    if n < 1:
        raise UsageError("n must be positive")
    center = np.asarray(center, dtype=float)
    diag = _clamped_diag(cov)
    z = normal_quantile(0.5 * (1.0 + level)) if level > 0 else 0.0
    half = z * np.sqrt(diag / n)
    return ConfidenceIntervals(center - half, center + half, level, center.copy())


def z_test_pvalues(center, null, cov, n: int) -> np.ndarray:
    """Two-sided Z-test p-values ``2 (1 - Phi(|z_j|))``.

    A zero variance gives ``p = 1`` when the center equals the null value and
    ``p = 0`` otherwise.
    """
    center = np.asarray(center, dtype=float)
    null = np.broadcast_to(np.asarray(null, dtype=float), center.shape)
    diag = _clamped_diag(cov)
    out = np.empty(center.shape)
    for j in range(center.size):
        diff = center[j] - null[j]
        if diag[j] == 0.0:
            out[j] = 1.0 if diff == 0.0 else 0.0
            continue
        z = math.sqrt(n) * diff / math.sqrt(diag[j])
        out[j] = min(1.0, 2.0 * normal_sf(abs(z)))
    return out


def bonferroni_threshold(pvalues, fwer: float = 0.05) -> np.ndarray:
    """Flag coordinates with ``p_j <= fwer / p``."""
    if not 0.0 < fwer < 1.0:
        raise UsageError(f"fwer must lie in (0, 1), got {fwer}")
    p = np.asarray(pvalues, dtype=float)
    return p <= fwer / p.size


def coverage_simulation(preset, n_sims: int, master_seed: int = 0, method: str | None = None, parallel: int = 1, level: float = 0.95):
    """Monte Carlo coverage and average interval length for a preset.

    See :func:`newton_infer.simulation.run_coverage`.
    """
    from .simulation import run_coverage

    return run_coverage(preset, n_sims, master_seed, method, parallel, level)
