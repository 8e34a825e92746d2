"""Circular-block outer sampling for serially dependent data, and Newey-West.

Sampling the outer minibatch as a contiguous block that wraps around the end
of the series keeps the block-averaged gradient unbiased for the full
gradient while letting the replicates pick up autocovariance up to the block
length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .approx_newton import NewtonInferConfig, InferenceRun, _outer_loop, warm_start
from .errors import ConfigError, UsageError
from .model import Dataset, LossModel


class HacWeighting(str, Enum):
    BARTLETT = "bartlett"
    ALGORITHM_IMPLIED = "algorithm_implied"

    def weight(self, j: int, l: int) -> float:
        if self is HacWeighting.BARTLETT:
            return 1.0 - j / (l + 1)
        return 1.0 - j / l


@dataclass(frozen=True)
class BlockSamplerConfig:
    lag: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("must be >= 1", "n")
        if not 1 <= self.lag <= self.n:
            raise ConfigError(f"lag must lie in [1, n={self.n}], got {self.lag}", "lag")


def default_lag(n: int) -> int:
    """``floor(n^(1/4))``, at least 1."""
    return max(1, int(math.floor(n**0.25 + 1e-12)))


def circular_block(i_o: int, l: int, n: int) -> np.ndarray:
    """Indices ``(i_o + k) mod n`` for ``k = 0 .. l-1``."""
    if l > n or l < 1:
        raise UsageError(f"block length {l} must lie in [1, n={n}]")
    if not 0 <= i_o < n:
        raise UsageError(f"block start {i_o} out of range for n={n}")
    return (i_o + np.arange(l)) % n


def run_inference_timeseries(
    loss: LossModel,
    data: Dataset,
    theta0=None,
    cfg: NewtonInferConfig = NewtonInferConfig(),
    l: int | None = None,
    rho_schedule=None,
) -> InferenceRun:
    """Approximate Newton inference with circular-block outer minibatches.

    The outer batch size ``S_o`` is ignored; the block length ``l`` takes its
    place, including in the replicate scaling ``sqrt(l) g_bar / rho``. Block
    starts are drawn with the same call the i.i.d. engine uses for its outer
    indices, so ``l=1`` reproduces that engine with ``S_o=1``.
    """
    n = data.n
    l = default_lag(n) if l is None else l
    BlockSamplerConfig(l, n)
    if theta0 is None:
        theta0 = warm_start(loss, data, cfg)
    offsets = np.arange(l)

    def draw(rng):
        start = int(rng.integers(0, n, size=1)[0])
        return (start + offsets) % n, start

    run = _outer_loop(loss, data, theta0, cfg, draw, math.sqrt(l), rho_schedule, method="timeseries")
    return run


def newey_west(gradients, l: int, weighting: HacWeighting | str = HacWeighting.BARTLETT) -> np.ndarray:
    """Lag-weighted long-run covariance of a sequence of gradient vectors.

    All terms, including the autocovariances, are divided by ``n``.

    Parameters
    ----------
    gradients : array of shape (n,) or (n, p)
    l : int
        Largest lag included.
    weighting : HacWeighting
        ``bartlett`` uses ``1 - j/(l+1)``; ``algorithm_implied`` uses ``1 - j/l``.
    """
    g = np.asarray(gradients, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    n = g.shape[0]
    if l < 0:
        raise UsageError("lag must be non-negative")
    if n <= l:
        raise UsageError(f"need more than l={l} gradients, got {n}")
    weighting = HacWeighting(weighting)
    out = g.T @ g
    for j in range(1, l + 1):
        w = weighting.weight(j, l)
        if w == 0.0:
            continue
        cross = g[j:].T @ g[:-j]
        out += w * (cross + cross.T)
    out /= n
    return 0.5 * (out + out.T)
