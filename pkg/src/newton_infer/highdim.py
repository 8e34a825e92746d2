"""High-dimensional linear regression: thresholded covariance, modified LASSO,
proximal SVRG, approximate proximal Newton inference and the de-biased
estimator.

The soft-thresholded sample covariance ``S_hat`` is only ever touched through
its columns, each computable in ``O(np)`` time and ``O(p)`` memory from the
design matrix. Below ``dense_limit`` features it is materialized once, which
enables direct solves and the condition-number search for the threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .approx_newton import InferenceRun, Replicate, sample_without_replacement
from .errors import ConfigError, DivergenceError, NumericError, SingularMatrixError, UsageError
from .model import Dataset, make_rng

log = logging.getLogger(__name__)

DEFAULT_DENSE_LIMIT = 64
_CHUNK = 64


def shrink(value, omega):
    """Elementwise soft threshold ``sign(a) * max(|a| - omega, 0)``."""
    if np.any(np.asarray(omega) < 0):
        raise UsageError("threshold must be non-negative")
    a = np.asarray(value, dtype=float)
    out = np.sign(a) * np.maximum(np.abs(a) - omega, 0.0)
    return float(out) if out.ndim == 0 else out


class SoftThresholdCov:
    """Soft-thresholded sample covariance with implicit column access.

    Parameters
    ----------
    data : Dataset
    omega : float
        Threshold applied to every entry of ``X^T X / n``, diagonal included.
    dense_limit : int
        Materialize the matrix when ``p <= dense_limit``.
    """

    def __init__(self, data: Dataset, omega: float, dense_limit: int = DEFAULT_DENSE_LIMIT):
        if omega < 0:
            raise ConfigError("must be non-negative", "omega")
        self.x = data.x
        self.n, self.p = data.n, data.p
        self.omega = float(omega)
        self.dense_limit = int(dense_limit)
        self._dense = self._materialize() if self.p <= self.dense_limit else None
        self._chol = None

    @property
    def is_dense(self):
        return self._dense is not None

    def _materialize(self):
        c = self.x.T @ self.x / self.n
        s = shrink(c, self.omega)
        return 0.5 * (s + s.T)

    def to_dense(self):
        """Full ``p x p`` matrix; materializes on demand for oracles."""
        return self._dense if self._dense is not None else self._materialize()

    def column(self, k):
        return self.columns([k])[:, 0]

    def columns(self, idx):
        """Columns ``idx`` as a ``(p, len(idx))`` array."""
        idx = np.asarray(idx)
        if self._dense is not None:
            return self._dense[idx].T
        # einsum sums over samples in a fixed order, so entry (j, k) equals
        # entry (k, j) bitwise; BLAS blocking does not guarantee that
        return shrink(np.einsum("ij,ik->jk", self.x, self.x[:, idx]) / self.n, self.omega)

    def rows_dot(self, idx, w):
        """``sum_k w[k] * column(idx[k])``."""
        if self._dense is not None:
            return w @ self._dense[idx]
        return self.columns(idx) @ w

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if self._dense is not None:
            return self._dense @ v
        out = np.zeros(self.p)
        nz = np.flatnonzero(v)
        for start in range(0, nz.size, _CHUNK):
            idx = nz[start : start + _CHUNK]
            out += self.columns(idx) @ v[idx]
        return out

    def diagonal(self):
        if self._dense is not None:
            return np.diag(self._dense).copy()
        return shrink(np.einsum("ij,ij->j", self.x, self.x) / self.n, self.omega)

    def solve(self, rhs, tol=1e-12):
        """``S_hat^{-1} rhs`` for a vector or a ``(p, k)`` block."""
        rhs = np.asarray(rhs, dtype=float)
        if self._dense is not None:
            if self._chol is None:
                try:
                    self._chol = scipy.linalg.cho_factor(self._dense)
                except np.linalg.LinAlgError:
                    lam = float(np.linalg.eigvalsh(self._dense)[0])
                    raise SingularMatrixError(
                        f"thresholded covariance is not positive definite (min eigenvalue {lam:.3g})"
                    ) from None
            return scipy.linalg.cho_solve(self._chol, rhs)
        op = scipy.sparse.linalg.LinearOperator((self.p, self.p), matvec=self.matvec, dtype=float)
        cols = rhs[:, None] if rhs.ndim == 1 else rhs
        out = np.empty_like(cols)
        for k in range(cols.shape[1]):
            sol, info = scipy.sparse.linalg.cg(op, cols[:, k], rtol=tol, atol=0.0, maxiter=10 * self.p)
            if info != 0:
                raise NumericError(f"conjugate gradient did not converge (info={info})")
            out[:, k] = sol
        return out[:, 0] if rhs.ndim == 1 else out


def s_hat_column(cov: SoftThresholdCov, k: int) -> np.ndarray:
    if not 0 <= k < cov.p:
        raise UsageError(f"column {k} out of range for p={cov.p}")
    return cov.column(k)


def s_hat_matvec(cov: SoftThresholdCov, v) -> np.ndarray:
    return cov.matvec(v)


def response_moment(data: Dataset) -> np.ndarray:
    """``X^T y / n``."""
    return data.x.T @ data.y / data.n


def modified_lasso_objective(data: Dataset, theta, cov: SoftThresholdCov, lam: float) -> float:
    """``1/2 theta'(S_hat - C)theta + (1/2n)||X theta - y||^2 + lam ||theta||_1``."""
    if lam < 0:
        raise UsageError("penalty must be non-negative")
    theta = np.asarray(theta, dtype=float)
    xt = data.x @ theta
    quad = 0.5 * theta @ cov.matvec(theta) - 0.5 * (xt @ xt) / data.n
    resid = xt - data.y
    return float(quad + 0.5 * (resid @ resid) / data.n + lam * np.abs(theta).sum())


# ---------------------------------------------------------------------------
# hyperparameters


@dataclass(frozen=True)
class HighDimConfig:
    lam: float | None = None
    omega: float | None = None
    T: int = 50
    S_o: int = 1
    L_o: int | None = None  # None: ceil(log p * log(t + 2)) epochs at outer step t
    L_i: int | None = None  # None: ceil(10 p / S_i)
    S_i: int = 10
    tau: float | None = None  # None: 0.5 S_i / p
    eta: float | None = None  # None: 0.5 S_i / p
    seed: int = 0
    dense_limit: int = DEFAULT_DENSE_LIMIT
    point_epochs: int = 100
    debias_epochs: int = 200
    tol: float = 1e-10
    c_lambda: float = 1.0
    c_omega: float | None = None

    def __post_init__(self):
        for key in ("T", "S_o", "S_i", "point_epochs", "debias_epochs", "dense_limit"):
            if int(getattr(self, key)) < 1:
                raise ConfigError("must be >= 1", key)
        for key in ("lam", "omega"):
            val = getattr(self, key)
            if val is not None and not val > 0:
                raise ConfigError("must be positive", key)
        for key in ("L_o", "L_i", "tau", "eta", "c_omega"):
            val = getattr(self, key)
            if val is not None and not val > 0:
                raise ConfigError("must be positive", key)
        if self.c_lambda <= 0:
            raise ConfigError("must be positive", "c_lambda")

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return HighDimConfig(**d)

    def inner_length(self, p):
        return self.L_i if self.L_i is not None else int(math.ceil(10 * p / min(self.S_i, p)))

    def tau_for(self, p):
        return self.tau if self.tau is not None else 0.5 * min(self.S_i, p) / p

    def eta_for(self, p):
        return self.eta if self.eta is not None else 0.5 * min(self.S_i, p) / p

    def outer_epochs(self, p, t):
        if self.L_o is not None:
            return self.L_o
        return max(1, int(math.ceil(math.log(p) * math.log(t + 2))))


def lasso_cv_prepass(data: Dataset, seed=0, folds=5):
    """Noise level and l1 norm from a cross-validated plain LASSO fit.

    Returns ``(sigma_hat, l1_hat)`` where ``sigma_hat^2 = RSS / (n - df)``.
    """
    from sklearn.linear_model import LassoCV

    # sklearn only accepts 32-bit seeds; child seeds here are 64-bit
    state = int(seed) % 2**32
    fit = LassoCV(cv=folds, alphas=20, eps=1e-2, tol=1e-3, random_state=state, max_iter=5000).fit(data.x, data.y)
    coef = fit.coef_
    df = int(np.count_nonzero(coef) + (1 if abs(fit.intercept_) > 0 else 0))
    resid = data.y - fit.predict(data.x)
    sigma = math.sqrt(float(resid @ resid) / max(data.n - df, 1))
    return sigma, float(np.abs(coef).sum())


def choose_c_omega(data: Dataset, grid=None) -> float:
    """Threshold multiplier minimizing the condition number of ``S_hat``."""
    rate = math.sqrt(math.log(data.p) / data.n) if data.p > 1 else 1.0 / math.sqrt(data.n)
    grid = np.geomspace(0.1, 4.0, 12) if grid is None else np.asarray(grid, float)
    c = data.x.T @ data.x / data.n
    best, best_cond = 1.0, math.inf
    for cw in grid:
        s = shrink(c, cw * rate)
        ev = scipy.linalg.eigvalsh(s, check_finite=False, driver="evd")
        lo, hi = float(ev[0]), float(ev[-1])
        if lo <= 0:
            continue
        if hi / lo < best_cond:
            best, best_cond = float(cw), hi / lo
    return best


def penalty_levels(n, p, sigma_hat, l1_hat, c_lambda=1.0, c_omega=1.0):
    """``(c_lambda (sigma_hat + l1_hat) r, c_omega r)`` with ``r = sqrt(log p / n)``."""
    if n < 2:
        raise UsageError("need at least two samples")
    if sigma_hat < 0 or l1_hat < 0:
        raise UsageError("sigma_hat and l1_hat must be non-negative")
    rate = math.sqrt(math.log(p) / n)
    return c_lambda * (sigma_hat + l1_hat) * rate, c_omega * rate


def default_hyperparams(data: Dataset, sigma_hat: float, l1_hat: float, c_lambda=1.0, c_omega=None, dense_limit=DEFAULT_DENSE_LIMIT):
    """Penalty and threshold at the ``sqrt(log p / n)`` rate.

    ``lam = c_lambda (sigma_hat + l1_hat) sqrt(log p / n)`` and
    ``omega = c_omega sqrt(log p / n)``. When ``c_omega`` is None it is chosen
    by :func:`choose_c_omega` if ``p <= dense_limit`` and set to 1 otherwise.
    """
    if data.n < 2:
        raise UsageError("need at least two samples")
    if c_omega is None:
        c_omega = choose_c_omega(data) if data.p <= dense_limit else 1.0
    return penalty_levels(data.n, data.p, sigma_hat, l1_hat, c_lambda, c_omega)


# ---------------------------------------------------------------------------
# SVRG epochs over features


def _feature_epoch(cov, anchor, full_grad, step, idx, scale, lam=0.0, offset=None):
    """One SVRG epoch with feature-sampled variance reduction.

    Iterates ``u <- prox(u - step * (full_grad + scale * S_hat[:, I](u - anchor)[I]))``
    where the prox soft-thresholds ``offset + u`` by ``step * lam``. Returns
    the average of the ``len(idx) + 1`` iterates and the last one.
    """
    u = anchor.copy()
    total = anchor.copy()
    thr = step * lam
    for rows in idx:
        diff = u[rows] - anchor[rows]
        u = u - step * (full_grad + scale * cov.rows_dot(rows, diff))
        if thr > 0:
            if offset is None:
                u = np.sign(u) * np.maximum(np.abs(u) - thr, 0.0)
            else:
                w = offset + u
                u = np.sign(w) * np.maximum(np.abs(w) - thr, 0.0) - offset
        total += u
    if not np.isfinite(total).all():
        raise DivergenceError("non-finite iterate in feature-sampled SVRG")
    return total / (len(idx) + 1), u


def _prox_residual(cov, b, theta, lam):
    grad = cov.matvec(theta) - b
    return float(np.max(np.abs(theta - shrink(theta - grad, lam))))


def prox_svrg_point_estimate(data: Dataset, cov: SoftThresholdCov, lam: float, cfg: HighDimConfig = HighDimConfig(), theta0=None, rng=None):
    """Minimize the modified LASSO objective by proximal SVRG.

    Each epoch computes the full smooth gradient at the anchor, takes
    ``L_i`` feature-sampled proximal steps and moves the anchor to the
    epoch-averaged iterate. Stops early once the proximal-gradient residual
    falls below ``cfg.tol`` and then returns the proximal-gradient point,
    which restores exact zeros.
    """
    if lam < 0:
        raise ConfigError("must be non-negative", "lam")
    p = data.p
    if cov.is_dense:
        lo = float(np.linalg.eigvalsh(cov.to_dense())[0])
        if lo <= 0:
            raise SingularMatrixError(f"thresholded covariance is not positive definite (min eigenvalue {lo:.3g})")
    rng = make_rng(cfg.seed, 2) if rng is None else rng
    b = response_moment(data)
    theta = np.zeros(p) if theta0 is None else np.array(theta0, dtype=float)
    S = min(cfg.S_i, p)
    eta, L_i = cfg.eta_for(p), cfg.inner_length(p)
    best = modified_lasso_objective(data, theta, cov, lam)
    worse = 0
    for _ in range(cfg.point_epochs):
        full = cov.matvec(theta) - b
        idx = sample_without_replacement(rng, p, S, L_i)
        theta, _ = _feature_epoch(cov, theta, full, eta, idx, p / S, lam)
        obj = modified_lasso_objective(data, theta, cov, lam)
        if obj > best + 1e-8:
            worse += 1
            if worse >= 3:
                raise DivergenceError(f"objective rose above its best value {best:.6g} for 3 consecutive epochs")
        else:
            worse = 0
        best = min(best, obj)
        if _prox_residual(cov, b, theta, lam) < cfg.tol:
            # averaging blurs exact zeros; the prox point is within tol and sparse
            return shrink(theta - (cov.matvec(theta) - b), lam)
    return theta


def highdim_inference(data: Dataset, cov: SoftThresholdCov, lam: float, cfg: HighDimConfig = HighDimConfig(), theta0=None):
    """Approximate proximal Newton inference with feature-sampled SVRG.

    At each outer step a minibatch of ``S_o`` samples (with replacement)
    gives ``g0 = -mean gradient``. The replicate track runs SVRG epochs
    started at ``g0`` on ``1/2 g'S_hat g - <g0, g>``, whose minimizer is
    ``S_hat^{-1} g0``; the point track runs proximal SVRG on the proximal
    Newton subproblem at ``theta_t``. Replicates are ``sqrt(S_o) * g_bar``.

    Returns
    -------
    (InferenceRun, ndarray)
        The run and the averaged point estimate.
    """
    if lam < 0:
        raise ConfigError("must be non-negative", "lam")
    n, p = data.n, data.p
    x, y = data.x, data.y
    rng = make_rng(cfg.seed, 0)
    if theta0 is None:
        theta0 = prox_svrg_point_estimate(data, cov, lam, cfg, rng=make_rng(cfg.seed, 1))
    theta0 = np.array(theta0, dtype=float)
    b = response_moment(data)
    S = min(cfg.S_i, p)
    tau, eta, L_i = cfg.tau_for(p), cfg.eta_for(p), cfg.inner_length(p)
    scale = p / S
    theta = theta0.copy()
    trace, reps, drawn = [theta0.copy()], [], []
    bound = 1e6 * (1.0 + np.linalg.norm(theta0))
    for t in range(cfg.T):
        rows = rng.integers(0, n, size=cfg.S_o)
        drawn.append(rows)
        xb = x[rows]
        g0 = -(xb.T @ (xb @ theta - y[rows])) / cfg.S_o
        smooth = cov.matvec(theta) - b
        g, d = g0.copy(), np.zeros(p)
        g_tot, d_tot = g0.copy(), d.copy()
        L_o = cfg.outer_epochs(p, t)
        for _ in range(L_o):
            idx = sample_without_replacement(rng, p, S, L_i)
            _, g = _feature_epoch(cov, g, cov.matvec(g) - g0, tau, idx, scale)
            _, d = _feature_epoch(cov, d, cov.matvec(d) + smooth, eta, idx, scale, lam, offset=theta)
            g_tot += g
            d_tot += d
        g_bar = g_tot / (L_o + 1)
        reps.append(Replicate(g_bar, 1.0, math.sqrt(cfg.S_o) * g_bar))
        theta = theta + d_tot / (L_o + 1)
        if not np.isfinite(theta).all() or np.linalg.norm(theta - theta0) > bound:
            raise DivergenceError(f"outer iterate diverged at step {t}")
        trace.append(theta.copy())
    run = InferenceRun(np.array(trace), reps, cfg, cfg.S_o, None, "highdim", np.array(drawn))
    return run, run.theta_avg


# ---------------------------------------------------------------------------
# de-biasing and plug-in covariance


@dataclass(frozen=True, eq=False)
class DebiasedEstimate:
    theta_hat: np.ndarray
    theta_d: np.ndarray
    variance: np.ndarray  # diagonal of the plug-in covariance divided by n

    @property
    def se(self):
        return np.sqrt(self.variance)


def _resolve_mode(mode, cov):
    mode = str(mode).lower()
    if mode in ("exact", "exactdense", "exact_dense", "dense"):
        if not cov.is_dense:
            raise ConfigError(f"exact mode needs p <= dense_limit ({cov.dense_limit}), got p={cov.p}", "dense_limit")
        return "exact"
    if mode == "svrg":
        return "svrg"
    raise ConfigError(f"unknown mode {mode!r}", "mode")


def svrg_solve(cov: SoftThresholdCov, rhs, cfg: HighDimConfig = HighDimConfig(), rng=None):
    """``S_hat^{-1} rhs`` by SVRG epochs with feature-sampled corrections.

    Each epoch runs the inner recursion ``d <- d + d0 - eta (p/S) S_hat[:, I] d[I]``
    with ``d0 = -eta (S_hat u - rhs)`` and moves ``u`` by the averaged ``d``.
    """
    p = cov.p
    rng = make_rng(cfg.seed, 3) if rng is None else rng
    rhs = np.asarray(rhs, dtype=float)
    S = min(cfg.S_i, p)
    eta, L_i = cfg.eta_for(p), cfg.inner_length(p)
    scale = p / S
    u = np.zeros(p)
    ref = max(np.abs(rhs).max(), 1e-300)
    for _ in range(cfg.debias_epochs):
        resid = cov.matvec(u) - rhs
        if np.abs(resid).max() <= cfg.tol * ref:
            break
        d0 = -eta * resid
        d = d0.copy()
        total = d0.copy()
        for rows in sample_without_replacement(rng, p, S, L_i):
            d = d + d0 - eta * scale * cov.rows_dot(rows, d[rows])
            total += d
        u = u + total / (L_i + 1)
        if not np.isfinite(u).all():
            raise DivergenceError("SVRG linear solve diverged")
    return u


def plugin_sandwich_highdim(data: Dataset, theta_hat, cov: SoftThresholdCov, mode="exact", diagonal_only=None, coords=None):
    """``S_hat^{-1} [(1/n) sum r_i^2 x_i x_i'] S_hat^{-1}`` with ``r = X theta_hat - y``.

    Returns the full matrix, or only its diagonal (restricted to ``coords``)
    when ``diagonal_only`` is true. Diagonal mode is the default above the
    dense limit; it solves one system per requested coordinate.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    r2 = (data.x @ theta_hat - data.y) ** 2
    n = data.n
    if diagonal_only is None:
        diagonal_only = not cov.is_dense
    if _resolve_mode(mode, cov) == "exact" or cov.is_dense:
        a = cov.solve(data.x.T)  # p x n
        if diagonal_only:
            diag = (a * a) @ r2 / n
            return diag if coords is None else diag[np.asarray(coords)]
        out = (a * r2) @ a.T / n
        return 0.5 * (out + out.T)
    if not diagonal_only:
        raise ConfigError("full matrix needs p <= dense_limit", "dense_limit")
    coords = np.arange(cov.p) if coords is None else np.asarray(coords)
    out = np.empty(coords.size)
    for m, j in enumerate(coords):
        e = np.zeros(cov.p)
        e[j] = 1.0
        u = cov.solve(e)
        xu = data.x @ u
        out[m] = float(r2 @ (xu * xu)) / n
    return out


def debiased_estimator(data: Dataset, theta_hat, cov: SoftThresholdCov, mode="exact", cfg: HighDimConfig = HighDimConfig()) -> DebiasedEstimate:
    """``theta_hat + S_hat^{-1} X'(y - X theta_hat)/n`` with plug-in variances."""
    mode = _resolve_mode(mode, cov)
    theta_hat = np.asarray(theta_hat, dtype=float)
    corr_rhs = data.x.T @ (data.y - data.x @ theta_hat) / data.n
    if mode == "exact":
        corr = cov.solve(corr_rhs)
    else:
        corr = svrg_solve(cov, corr_rhs, cfg)
    theta_d = theta_hat + corr
    var = plugin_sandwich_highdim(data, theta_hat, cov, "exact" if cov.is_dense else "svrg", diagonal_only=True) / data.n
    if not np.isfinite(theta_d).all():
        raise NumericError("de-biased estimate is not finite")
    return DebiasedEstimate(theta_hat, theta_d, np.maximum(var, 0.0))


@dataclass(frozen=True, eq=False)
class HighDimFit:
    lam: float
    omega: float
    cov: SoftThresholdCov
    theta_hat: np.ndarray
    debiased: DebiasedEstimate


def fit_highdim(data: Dataset, cfg: HighDimConfig = HighDimConfig(), mode="exact") -> HighDimFit:
    """Hyperparameters, thresholded covariance, point estimate and de-biasing."""
    lam, omega = cfg.lam, cfg.omega
    if lam is None or omega is None:
        if lam is None:
            sigma_hat, l1_hat = lasso_cv_prepass(data, seed=cfg.seed)
        else:
            sigma_hat, l1_hat = 0.0, 0.0
        lam_d, omega_d = default_hyperparams(data, sigma_hat, l1_hat, cfg.c_lambda, cfg.c_omega, cfg.dense_limit)
        lam = lam_d if lam is None else lam
        omega = omega_d if omega is None else omega
    cov = SoftThresholdCov(data, omega, cfg.dense_limit)
    theta_hat = prox_svrg_point_estimate(data, cov, lam, cfg)
    if mode == "exact" and not cov.is_dense:
        mode = "svrg"
    deb = debiased_estimator(data, theta_hat, cov, mode, cfg)
    return HighDimFit(lam, omega, cov, theta_hat, deb)
