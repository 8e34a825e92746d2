"""Named synthetic experiments with their generator and engine settings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .approx_newton import NewtonInferConfig
from .errors import ConfigError
from .highdim import HighDimConfig
from .model import (
    CovarianceSpec,
    Dataset,
    SyntheticTruth,
    generate_linear,
    generate_logistic,
    generate_ma_timeseries,
    generate_mean,
    generate_sparse_highdim,
    get_loss,
)

LOWDIM_KINDS = ("linear", "logistic", "timeseries", "mean")


@dataclass(frozen=True)
class ExperimentPreset:
    """Generator parameters plus the engine configuration for one experiment.

    ``engine`` holds keyword overrides for :class:`NewtonInferConfig`
    (low-dimensional kinds) or :class:`HighDimConfig` (``kind="highdim"``).
    """

    name: str
    kind: str
    n: int
    p: int
    sigma: float = 0.7
    cov_rate: float = 0.0  # 0 gives the identity, otherwise rate^|j-k|
    theta_scale: float = 1.0  # theta* = theta_scale / sqrt(p) * ones (linear, time series)
    shift_scale: float = 0.1  # class mean = shift_scale / sqrt(p) * ones (logistic)
    sparsity: int = 0
    amplitude: float = 0.0
    ma_coeffs: tuple = (0.6, 0.8)
    lag: int | None = None
    method: str = "sgd"
    n_sims: int = 200
    engine: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LOWDIM_KINDS + ("highdim",):
            raise ConfigError(f"unknown kind {self.kind!r}", "kind")
        if self.n < 1 or self.p < 1:
            raise ConfigError("n and p must be positive", "n")
        self.engine_config()

    @property
    def loss_name(self):
        return {"logistic": "logistic", "mean": "mean"}.get(self.kind, "squared")

    def loss(self):
        return get_loss(self.loss_name)

    def covariance(self):
        if self.cov_rate == 0.0:
            return CovarianceSpec.identity(self.p)
        return CovarianceSpec.toeplitz(self.p, self.cov_rate)

    def engine_config(self, seed=None):
        kw = dict(self.engine)
        if seed is not None:
            kw["seed"] = int(seed)
        try:
            if self.kind == "highdim":
                return HighDimConfig(**kw)
            return NewtonInferConfig(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc), "engine") from None

    def truth(self) -> np.ndarray:
        p = self.p
        if self.kind in ("linear", "timeseries"):
            return np.full(p, self.theta_scale / math.sqrt(p))
        if self.kind == "logistic":
            # mirrored Gaussian classes: log-odds are exactly 2 mu' Sigma^-1 x
            return 2.0 * np.linalg.solve(self.covariance().matrix(), np.full(p, self.shift_scale / math.sqrt(p)))
        if self.kind == "mean":
            return np.zeros(p)
        theta = np.zeros(p)
        theta[: self.sparsity] = self.amplitude
        return theta

    def generate(self, seed) -> Dataset:
        p = self.p
        if self.kind == "linear":
            return generate_linear(self.n, self.covariance(), SyntheticTruth(self.truth(), self.sigma, 0), seed)
        if self.kind == "logistic":
            return generate_logistic(self.n, self.covariance(), np.full(p, self.shift_scale / math.sqrt(p)), seed)
        if self.kind == "timeseries":
            return generate_ma_timeseries(self.n, p, self.truth(), self.ma_coeffs, self.sigma, seed)
        if self.kind == "mean":
            return generate_mean(self.n, p, seed)
        data, _ = generate_sparse_highdim(self.n, p, self.sparsity, self.amplitude, self.sigma, seed)
        return data

    def with_overrides(self, **changes):
        engine = dict(self.engine)
        engine.update(changes.pop("engine", {}))
        return replace(self, engine=engine, **changes)

    def to_dict(self):
        d = asdict(self)
        d["ma_coeffs"] = list(self.ma_coeffs)
        return d


_LIN = dict(T=100, d_o=2 / 3, d_i=2 / 3, S_o=10, S_i=10)
_LOG = dict(T=50, d_o=2 / 3, d_i=2 / 3, rho0=0.1, L=100, S_o=10, S_i=10, delta0=0.01)

PRESETS = {
    p.name: p
    for p in [
        ExperimentPreset("lin1", "linear", 100, 10, engine=dict(_LIN, rho0=0.1, L=200, tau0=20.0)),
        ExperimentPreset("lin2", "linear", 100, 10, cov_rate=0.4, engine=dict(_LIN, rho0=0.7, L=100, tau0=1.0)),
        ExperimentPreset("log1", "logistic", 100, 10, engine=dict(_LOG, tau0=2.0)),
        ExperimentPreset("log2", "logistic", 100, 10, cov_rate=0.4, engine=dict(_LOG, tau0=5.0)),
        ExperimentPreset(
            "tsma",
            "timeseries",
            200,
            20,
            method="timeseries",
            n_sims=100,
            engine=dict(T=400, L=100, S_o=1, S_i=10, rho0=0.5, tau0=0.5, d_o=2 / 3, d_i=2 / 3),
        ),
        ExperimentPreset(
            "highdim-null",
            "highdim",
            600,
            1000,
            method="debias",
            engine=dict(dense_limit=1024),
        ),
        ExperimentPreset(
            "highdim-null-small",
            "highdim",
            200,
            200,
            method="debias",
            engine=dict(dense_limit=1024),
        ),
        ExperimentPreset(
            "highdim-sparse",
            "highdim",
            600,
            1000,
            sparsity=8,
            amplitude=1 / math.sqrt(8),
            method="debias",
            engine=dict(dense_limit=1024, c_lambda=0.3),
        ),
        ExperimentPreset(
            "meanest",
            "mean",
            500,
            2,
            n_sims=100,
            engine=dict(T=1000, L=1, S_o=1, S_i=1, rho0=0.5, tau0=0.5, d_o=0.6, d_i=0.6),
        ),
    ]
}


def get_preset(name: str) -> ExperimentPreset:
    key = name.lower().replace("_", "-")
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}", "preset")
    return PRESETS[key]
