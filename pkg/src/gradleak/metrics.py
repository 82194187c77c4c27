"""Extraction metrics A, P, R and their closed-form expectations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream

__all__ = [
    "BoundSet",
    "ExtractionMetrics",
    "aggregate_ci",
    "bounds",
    "expected_A",
    "expected_P",
    "expected_R",
    "isolated_samples",
    "isolation_probability",
    "metrics_from_mask",
    "observed_metrics",
    "simulate_bernoulli_metrics",
]

CI_MULTIPLIER = 1.96


@dataclass(frozen=True)
class ExtractionMetrics:
    A: float
    P: float
    R: float
    N: int
    B: int

    def __post_init__(self):
        for name in ("A", "P", "R"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.P > self.A:
            raise ValueError("P cannot exceed A")


@dataclass(frozen=True)
class BoundSet:
    p_A: float
    p_u: float
    p_R: float
    asymptotes: tuple[float, float] = (1.0 - math.exp(-1.0), math.exp(-1.0))


def _check_b(batch_size: int) -> int:
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    return int(batch_size)


def _log_miss(batch_size: int) -> float:
    # log((B - 1) / B)
    return math.log1p(-1.0 / batch_size)


def expected_A(batch_size: int) -> float:
    """Expected share of neurons active for at least one of ``B`` samples."""
    b = _check_b(batch_size)
    if b == 1:
        return 1.0
    return -math.expm1(b * _log_miss(b))


def expected_P(batch_size: int) -> float:
    """Expected share of neurons active for exactly one sample."""
    b = _check_b(batch_size)
    if b == 1:
        return 1.0
    return math.exp((b - 1) * _log_miss(b))


def isolation_probability(batch_size: int) -> float:
    """Probability that a given neuron isolates a given sample."""
    return expected_P(batch_size) / _check_b(batch_size)


def expected_R(n_neurons: int, batch_size: int) -> float:
    """Expected share of samples isolated by at least one of ``N`` neurons."""
    if n_neurons < 0:
        raise ValueError("n_neurons must be >= 0")
    p = isolation_probability(batch_size)
    if n_neurons == 0:
        return 0.0
    if p >= 1.0:
        return 1.0
    return -math.expm1(n_neurons * math.log1p(-p))


def bounds(n_neurons: int, batch_size: int) -> BoundSet:
    return BoundSet(expected_A(batch_size), expected_P(batch_size), expected_R(n_neurons, batch_size))


def isolated_samples(mask: np.ndarray) -> np.ndarray:
    """Boolean per sample: isolated by at least one uniquely-activated neuron.

    ``mask`` has shape (B, N) with ``mask[b, n]`` true when sample ``b``
    activates neuron ``n``.
    """
    mask = np.asarray(mask, dtype=bool)
    unique = mask.sum(axis=0) == 1
    return mask[:, unique].any(axis=1)


def metrics_from_mask(mask: np.ndarray) -> ExtractionMetrics:
    mask = np.asarray(mask, dtype=bool)
    b, n = mask.shape
    counts = mask.sum(axis=0)
    a = float(np.count_nonzero(counts >= 1)) / n if n else 0.0
    p = float(np.count_nonzero(counts == 1)) / n if n else 0.0
    r = float(np.count_nonzero(isolated_samples(mask))) / b
    return ExtractionMetrics(a, p, r, n, b)


def observed_metrics(trace) -> ExtractionMetrics:
    """A, P, R read off the activation pattern of one forward pass."""
    return metrics_from_mask(trace.activation_mask)


def aggregate_ci(run_means) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 standard errors) across runs."""
    x = np.asarray(list(run_means), dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 runs for a confidence interval")
    half = CI_MULTIPLIER * x.std(ddof=1) / math.sqrt(x.shape[0])
    return float(x.mean()), float(half)


def simulate_bernoulli_metrics(
    n_neurons: int, batch_size: int, trials: int, rng: RngStream, chunk: int = 256
) -> tuple[float, float, float]:
    """Mean A, P, R over ``trials`` masks with independent Bernoulli(1/B) entries."""
    total = np.zeros(3)
    p = 1.0 / batch_size
    done = 0
    while done < trials:
        k = min(chunk, trials - done)
        # float32 uniforms resolve 1/B to ~1e-7, far below Monte-Carlo noise
        mask = rng.generator.random((k, batch_size, n_neurons), dtype=np.float32) < np.float32(p)
        counts = mask.sum(axis=1)
        unique = counts == 1
        total[0] += np.count_nonzero(counts >= 1) / n_neurons
        total[1] += np.count_nonzero(unique) / n_neurons
        isolated = (mask & unique[:, None, :]).any(axis=2)
        total[2] += np.count_nonzero(isolated) / batch_size
        done += k
    return tuple(float(v) for v in total / trials)
