"""Malicious initialization of the attack layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LinearLayer
from .numerics import RngStream, as_matrix, normal_quantile

__all__ = [
    "PairsParams",
    "PairsResult",
    "QbiParams",
    "benign_init",
    "pairs_init",
    "pairs_search",
    "qbi_bias",
    "qbi_init",
    "trap_weights_init",
]


@dataclass(frozen=True)
class QbiParams:
    batch_size: int
    input_width: int

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("QBI needs batch_size >= 2 (the quantile at 1 is infinite)")
        if self.input_width < 1:
            raise ValueError("input_width must be >= 1")


def qbi_bias(batch_size: int, input_width: int) -> float:
    """Bias giving each neuron an activation probability of ``1/batch_size``."""
    p = QbiParams(batch_size, input_width)
    return normal_quantile(1.0 / p.batch_size) * math.sqrt(p.input_width)


def qbi_init(layer: LinearLayer, params: QbiParams, rng: RngStream) -> LinearLayer:
    """Standard-normal weights and a constant quantile-derived bias."""
    if params.input_width != layer.n_in:
        raise ValueError(f"params.input_width={params.input_width} but layer has {layer.n_in} inputs")
    weights = rng.normal((layer.n_out, layer.n_in))
    bias = np.full(layer.n_out, qbi_bias(params.batch_size, params.input_width))
    return LinearLayer(weights, bias)


def benign_init(layer: LinearLayer, rng: RngStream) -> LinearLayer:
    """Gaussian weights with zero bias, the passive-leakage baseline."""
    return LinearLayer(rng.normal((layer.n_out, layer.n_in)), np.zeros(layer.n_out))


def trap_weights_init(layer: LinearLayer, negative_shift: float, rng: RngStream) -> LinearLayer:
    """Approximate trap-weights baseline.

    In every row a random half of the entries is made positive and the
    other half negative, the negative half scaled by ``1 + negative_shift``.
    Bias is zero. With ``negative_shift=0`` each entry is still N(0, 1).
    """
    if negative_shift < 0:
        raise ValueError("negative_shift must be >= 0")
    n, m = layer.n_out, layer.n_in
    magnitude = np.abs(rng.normal((n, m)))
    half = m // 2
    weights = np.empty((n, m))
    for i in range(n):
        neg = np.zeros(m, dtype=bool)
        neg[rng.choice(m, half)] = True
        weights[i] = np.where(neg, -magnitude[i] * (1.0 + negative_shift), magnitude[i])
    return LinearLayer(weights, np.zeros(n))


@dataclass
class PairsParams:
    auxiliary: np.ndarray
    neuron_group_size: int
    retries: int = 1000

    def __post_init__(self):
        self.auxiliary = as_matrix(self.auxiliary, "auxiliary")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.neuron_group_size < 1:
            raise ValueError("neuron_group_size must be >= 1")


@dataclass
class PairsResult:
    layer: LinearLayer
    reinitialized: np.ndarray
    """Number of weight-row redraws per neuron."""
    frozen: list[set[int]]
    """Auxiliary-batch indices frozen per neuron group."""
    isolating: np.ndarray
    """Per neuron, the aux-batch index it isolates, or -1."""
    aux_batches: list[np.ndarray]
    """Auxiliary pool row indices used for each group."""


def _group_batches(pool: int, n: int, group: int) -> list[np.ndarray]:
    k = math.ceil(n / group)
    return [np.arange(g * group, (g + 1) * group) % pool for g in range(k)]


def pairs_search(
    layer: LinearLayer, params: PairsParams, rng: RngStream, chunk: int = 16
) -> PairsResult:
    """Pattern-aware random search over weight rows, with bookkeeping.

    Neurons are split into groups of ``neuron_group_size``. Each group sees
    its own auxiliary batch. A neuron keeps its row once it activates for
    exactly one not-yet-frozen sample, which is then frozen; otherwise the
    row is redrawn, at most ``retries`` times. The bias is never touched.
    """
    aux = params.auxiliary
    n, m = layer.n_out, layer.n_in
    if aux.shape[1] != m:
        raise ValueError(f"auxiliary width {aux.shape[1]} != layer input width {m}")
    if aux.shape[0] < n:
        raise ValueError(f"PAIRS needs at least N={n} auxiliary samples, got {aux.shape[0]}")
    out = layer.copy()
    redraws = np.zeros(n, dtype=np.int64)
    isolating = np.full(n, -1, dtype=np.int64)
    group = params.neuron_group_size
    batches = _group_batches(aux.shape[0], n, group)
    frozen_sets: list[set[int]] = []

    for g, idx in enumerate(batches):
        xb = aux[idx]
        frozen: set[int] = set()
        for neuron in range(g * group, min((g + 1) * group, n)):
            bias = out.bias[neuron]
            if params.retries == 0:
                continue
            hit = _isolates(xb @ out.weights[neuron] + bias > 0, frozen)
            drawn = 0
            while hit is None and drawn < params.retries:
                # redraws are evaluated in blocks; the first success wins
                size = min(chunk, params.retries - drawn)
                cands = rng.normal((size, m))
                active = (xb @ cands.T + bias) > 0
                for j in range(size):
                    # the last permitted redraw is never checked
                    if drawn + j + 1 < params.retries:
                        hit = _isolates(active[:, j], frozen)
                    if hit is not None or j == size - 1:
                        out.weights[neuron] = cands[j]
                        redraws[neuron] = drawn + j + 1
                        break
                drawn += size
            if hit is not None:
                frozen.add(hit)
                isolating[neuron] = hit
        frozen_sets.append(frozen)
    return PairsResult(out, redraws, frozen_sets, isolating, batches)


def _isolates(active: np.ndarray, frozen: set[int]) -> int | None:
    hits = np.flatnonzero(active)
    if hits.shape[0] == 1 and int(hits[0]) not in frozen:
        return int(hits[0])
    return None


def pairs_init(layer: LinearLayer, params: PairsParams, rng: RngStream) -> LinearLayer:
    """PAIRS refinement of a QBI-initialized layer; see :func:`pairs_search`."""
    return pairs_search(layer, params, rng).layer
