"""Activation-count driven gradient pruning (AGGP), applied client-side."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import GradientReport
from .numerics import RngStream

__all__ = ["AggpConfig", "aggp_prune", "p_keep", "retained_count"]


@dataclass(frozen=True)
class AggpConfig:
    cutoff: int = 16
    p_l: float = 0.01
    p_u: float = 0.95
    retain_fraction: float = 0.25

    def __post_init__(self):
        if self.cutoff <= 2:
            raise ValueError("cutoff must be > 2")
        if not 0.0 <= self.p_l <= self.p_u <= 1.0:
            raise ValueError("need 0 <= p_l <= p_u <= 1")
        if not 0.0 <= self.retain_fraction <= 1.0:
            raise ValueError("retain_fraction must lie in [0, 1]")


def p_keep(a_n: int, cfg: AggpConfig = AggpConfig()) -> float:
    """Share of a row's largest gradients eligible to survive, for ``0 < a_n < cutoff``."""
    if not 0 < a_n < cfg.cutoff:
        raise ValueError(f"activation count {a_n} outside (0, {cfg.cutoff})")
    return (a_n - 1) ** 2 * (cfg.p_u - cfg.p_l) / (cfg.cutoff - 2) ** 2 + cfg.p_l


def retained_count(a_n: int, width: int, cfg: AggpConfig = AggpConfig()) -> tuple[int, int]:
    """(size of the top-magnitude pool, number of entries kept from it)."""
    # tiny slack so products like 0.01 * 100 do not round up past an integer
    top = min(width, math.ceil(p_keep(a_n, cfg) * width - 1e-9))
    return top, int(math.floor(cfg.retain_fraction * top))


def aggp_prune(report: GradientReport, cfg: AggpConfig, rng: RngStream) -> GradientReport:
    """Return a pruned copy of ``report``.

    Rows of neurons with ``0 < a_n < cutoff`` keep a random
    ``retain_fraction`` of their top ``p_keep`` share of entries by
    magnitude; all other entries become zero. Neurons that fired for a
    single sample also lose their bias gradient. Other rows are untouched.
    """
    out = report.copy()
    width = out.grad_w.shape[1]
    for n, a_n in enumerate(out.activation_counts):
        a_n = int(a_n)
        if a_n == 0 or a_n >= cfg.cutoff:
            continue
        top, keep = retained_count(a_n, width, cfg)
        row = out.grad_w[n]
        order = np.argsort(-np.abs(row), kind="stable")
        survivors = order[:top][rng.choice(top, keep)] if keep else order[:0]
        pruned = np.zeros_like(row)
        pruned[survivors] = row[survivors]
        out.grad_w[n] = pruned
        if a_n == 1:
            out.grad_b[n] = 0.0
    return out
