"""Loss families, gradient oracles and synthetic data generators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, UsageError


def make_rng(*keys) -> np.random.Generator:
    """Counter-based generator whose stream is fixed by ``keys``.

    ``make_rng(master_seed, replicate)`` gives every Monte Carlo replicate its
    own independent, reproducible stream.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return make_rng(*seed)
    return make_rng(seed)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Design matrix ``x`` (n x p) and responses ``y`` (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or y.ndim != 1:
            raise UsageError("x must be 2-D and y 1-D")
        if x.shape[0] != y.shape[0]:
            raise UsageError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise UsageError("dataset needs n >= 1 and p >= 1")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise NumericError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def is_binary(self) -> bool:
        return bool(np.all((self.y == 0.0) | (self.y == 1.0)))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)


# ---------------------------------------------------------------------------
# losses


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LossModel:
    """Per-sample loss ``f_i(theta)`` on rows of a :class:`Dataset`.

    Subclasses implement gradients in terms of the margins ``z = x @ theta`` so
    that callers running many inner steps at a fixed ``theta`` compute them once.
    """

    name = "abstract"

    def validate(self, data: Dataset) -> None:
        pass

    def values(self, x, y, theta):
        raise NotImplementedError

    def gradients(self, x, y, theta):
        """Per-sample gradients, shape (m, p)."""
        raise NotImplementedError

    def mean_gradient(self, x, y, theta):
        raise NotImplementedError

    def grad_diff(self, x, z, step):
        """Mean of ``grad f_k(theta + step) - grad f_k(theta)`` over rows ``x``.

        ``z`` holds ``x @ theta``. Implementations evaluate the difference in a
        cancellation-free form; in exact arithmetic it equals the plain
        difference of the two gradient evaluations.
        """
        raise NotImplementedError

    def hessian(self, x, y, theta):
        """Mean analytic Hessian over rows."""
        raise NotImplementedError

    def smoothness(self, x):
        """Per-sample bounds ``beta_i`` on the Hessian operator norm."""
        return np.einsum("ij,ij->i", x, x)

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self))


class SquaredLoss(LossModel):
    """``f_i = (x_i' theta - y_i)^2 / 2``."""

    name = "squared"

    def values(self, x, y, theta):
        r = x @ theta - y
        return 0.5 * r * r

    def gradients(self, x, y, theta):
        return x * (x @ theta - y)[:, None]

    def mean_gradient(self, x, y, theta):
        return x.T @ (x @ theta - y) / x.shape[0]

    def grad_diff(self, x, z, step):
        return x.T @ (x @ step) / x.shape[0]

    def hessian(self, x, y, theta):
        return x.T @ x / x.shape[0]


class LogisticLoss(LossModel):
    """``f_i = log(1 + exp(x_i' theta)) - y_i x_i' theta`` with ``y_i`` in {0, 1}."""

    name = "logistic"

    def validate(self, data):
        if not data.is_binary():
            raise UsageError("logistic loss needs responses in {0, 1}")

    def values(self, x, y, theta):
        z = x @ theta
        return np.logaddexp(0.0, z) - y * z

    def gradients(self, x, y, theta):
        return x * (_sigmoid(x @ theta) - y)[:, None]

    def mean_gradient(self, x, y, theta):
        return x.T @ (_sigmoid(x @ theta) - y) / x.shape[0]

    def grad_diff(self, x, z, step):
        # s(a) - s(b) = s(a) s(-b) (1 - exp(b - a)), exact without cancellation
        dz = x @ step
        diff = _sigmoid(z + dz) * _sigmoid(-z) * -np.expm1(-dz)
        return x.T @ diff / x.shape[0]

    def hessian(self, x, y, theta):
        s = _sigmoid(x @ theta)
        w = s * (1.0 - s)
        return (x * w[:, None]).T @ x / x.shape[0]

    def smoothness(self, x):
        # 1/4 ||x_i||^2 is exact; the squared-loss bound is kept as a conservative value
        return np.einsum("ij,ij->i", x, x)


class MeanLoss(LossModel):
    """Mean estimation, ``f_i = ||theta - x_i||^2 / 2``; ``y`` is ignored."""

    name = "mean"

    def values(self, x, y, theta):
        d = theta[None, :] - x
        return 0.5 * np.einsum("ij,ij->i", d, d)

    def gradients(self, x, y, theta):
        return theta[None, :] - x

    def mean_gradient(self, x, y, theta):
        return theta - x.mean(axis=0)

    def grad_diff(self, x, z, step):
        return np.array(step, dtype=float, copy=True)

    def hessian(self, x, y, theta):
        return np.eye(x.shape[1])

    def smoothness(self, x):
        return np.ones(x.shape[0])


LOSSES = {cls.name: cls for cls in (SquaredLoss, LogisticLoss, MeanLoss)}


def get_loss(name) -> LossModel:
    if isinstance(name, LossModel):
        return name
    try:
        return LOSSES[name]()
    except KeyError:
        raise ConfigError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}", "loss") from None


# ---------------------------------------------------------------------------
# gradient oracles


def _check_indices(data, indices):
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise UsageError("index list is empty")
    if idx.min() < 0 or idx.max() >= data.n:
        raise UsageError(f"indices must lie in [0, {data.n})")
    return idx


def _check_theta(data, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.p,):
        raise UsageError(f"theta must have shape ({data.p},), got {theta.shape}")
    return theta


def per_sample_gradient(loss: LossModel, data: Dataset, i: int, theta) -> np.ndarray:
    if not 0 <= i < data.n:
        raise UsageError(f"sample index {i} out of range [0, {data.n})")
    theta = _check_theta(data, theta)
    g = loss.gradients(data.x[i : i + 1], data.y[i : i + 1], theta)[0]
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite gradient at sample {i}")
    return g


def minibatch_gradient(loss: LossModel, data: Dataset, indices, theta) -> np.ndarray:
    """Average gradient over ``indices`` (duplicates count with multiplicity)."""
    idx = _check_indices(data, indices)
    theta = _check_theta(data, theta)
    g = loss.mean_gradient(data.x[idx], data.y[idx], theta)
    if not np.isfinite(g).all():
        raise NumericError("non-finite minibatch gradient")
    return g


def full_gradient(loss: LossModel, data: Dataset, theta) -> np.ndarray:
    return loss.mean_gradient(data.x, data.y, theta)


def hvp_finite_difference(loss: LossModel, data: Dataset, indices, theta, g, delta: float) -> np.ndarray:
    """Forward difference ``(grad(theta + delta g) - grad(theta)) / delta`` on a minibatch."""
    if not delta > 0:
        raise UsageError("delta must be positive")
    idx = _check_indices(data, indices)
    theta = _check_theta(data, theta)
    g = np.asarray(g, dtype=float)
    if g.shape != theta.shape:
        raise UsageError("g must have the same shape as theta")
    with np.errstate(over="ignore", invalid="ignore"):
        step = delta * g
        if not np.isfinite(theta + step).all():
            raise NumericError("theta + delta * g overflows")
    x = data.x[idx]
    out = loss.grad_diff(x, x @ theta, step) / delta
    if not np.isfinite(out).all():
        raise NumericError("non-finite Hessian-vector product")
    return out


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class CovarianceSpec:
    """Design covariance: identity or Toeplitz ``rate ** |j - k|``."""

    kind: str
    p: int
    rate: float | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "toeplitz"):
            raise ConfigError(f"unknown covariance kind {self.kind!r}", "cov.kind")
        if self.p < 1:
            raise ConfigError("p must be >= 1", "cov.p")
        if self.kind == "toeplitz" and not (self.rate is not None and 0.0 < self.rate < 1.0):
            raise ConfigError("toeplitz rate must lie in (0, 1)", "cov.rate")

    @classmethod
    def identity(cls, p):
        return cls("identity", p)

    @classmethod
    def toeplitz(cls, p, rate):
        return cls("toeplitz", p, rate)

    def matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.p)
        lag = np.abs(np.subtract.outer(np.arange(self.p), np.arange(self.p)))
        return self.rate**lag

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.matrix())
        except np.linalg.LinAlgError:
            raise ConfigError("covariance is not positive definite", "cov") from None


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    theta_star: np.ndarray
    sigma: float = 0.0
    sparsity: int = 0

    def __post_init__(self):
        theta = np.asarray(self.theta_star, dtype=float)
        if not np.isfinite(theta).all():
            raise ConfigError("theta_star must be finite", "theta_star")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0", "sigma")
        object.__setattr__(self, "theta_star", theta)


def _gaussian_rows(rng, n, cov: CovarianceSpec):
    z = rng.standard_normal((n, cov.p))
    if cov.kind == "identity":
        return z
    return z @ cov.cholesky().T


def generate_linear(n: int, cov: CovarianceSpec, truth: SyntheticTruth, seed) -> Dataset:
    if n < 1:
        raise UsageError("n must be >= 1")
    rng = as_generator(seed)
    x = _gaussian_rows(rng, n, cov)
    noise = rng.standard_normal(n) * truth.sigma
    return Dataset(x, x @ truth.theta_star + noise)


def generate_logistic(n: int, cov: CovarianceSpec, mean_shift, seed) -> Dataset:
    """Balanced labels; ``x | y ~ N((2y - 1) * mean_shift, Sigma)``."""
    if n < 1:
        raise UsageError("n must be >= 1")
    rng = as_generator(seed)
    shift = np.broadcast_to(np.asarray(mean_shift, dtype=float), (cov.p,))
    y = (rng.random(n) < 0.5).astype(float)
    x = _gaussian_rows(rng, n, cov) + np.outer(2.0 * y - 1.0, shift)
    return Dataset(x, y)


def generate_ma_timeseries(n: int, p: int, theta_star, ma_coeffs=(0.6, 0.8), z_sigma=0.7, seed=0) -> Dataset:
    """Linear model with MA(1) noise ``eps_i = a z_i + b z_{i-1}``.

    Regressors are i.i.d. ``N(1/sqrt(p) * 1, I)`` and independent of the noise.
    """
    if n < 2:
        raise UsageError("time series needs n >= 2")
    rng = as_generator(seed)
    a, b = ma_coeffs
    x = rng.standard_normal((n, p)) + 1.0 / math.sqrt(p)
    z = rng.standard_normal(n + 1) * z_sigma
    eps = a * z[1:] + b * z[:-1]
    return Dataset(x, x @ np.asarray(theta_star, dtype=float) + eps)


def generate_sparse_highdim(n: int, p: int, s: int, amplitude: float, sigma: float, seed):
    """Isotropic design, ``theta*`` with its first ``s`` entries equal to ``amplitude``."""
    if s > p:
        raise UsageError("sparsity s cannot exceed p")
    theta = np.zeros(p)
    theta[:s] = amplitude
    truth = SyntheticTruth(theta, sigma, s)
    return generate_linear(n, CovarianceSpec.identity(p), truth, seed), truth


def generate_mean(n: int, p: int, seed, loc=0.0, scale=1.0) -> Dataset:
    """Points for mean estimation; responses are unused zeros."""
    rng = as_generator(seed)
    return Dataset(loc + scale * rng.standard_normal((n, p)), np.zeros(n))


# ---------------------------------------------------------------------------
# CSV


def write_dataset_csv(path, data: Dataset) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(data.p)] + ["y"])
        for row, yi in zip(data.x, data.y):
            w.writerow([format(v, ".17g") for v in row] + [format(yi, ".17g")])


def read_dataset_csv(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "y" or header[:-1] != [f"x{j + 1}" for j in range(len(header) - 1)]:
            raise UsageError(f"{path}: header must be x1,...,xp,y")
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    return Dataset(arr[:, :-1], arr[:, -1])
