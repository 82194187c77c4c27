"""Server-side reconstruction from attack-layer gradients."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import BatchNormState, GradientReport

__all__ = [
    "BIAS_GRAD_THRESHOLD",
    "MatchResult",
    "ReconstructionSet",
    "default_tolerance",
    "disaggregate",
    "invert_batchnorm",
    "invert_layernorm",
    "match_reconstructions",
    "read_candidates",
    "write_candidates",
    "write_pnm",
]

BIAS_GRAD_THRESHOLD = 1e-12


@dataclass
class ReconstructionSet:
    candidates: np.ndarray
    """(K, M) candidate inputs, one per neuron with a non-zero bias gradient."""
    neurons: np.ndarray
    """Source neuron of each candidate."""
    single_activation: np.ndarray
    """True where the source neuron fired for exactly one sample."""
    matched: np.ndarray = field(default=None)
    errors: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.candidates.shape[0]

    @property
    def exact(self) -> np.ndarray:
        return self.candidates[self.single_activation]

    @property
    def blended(self) -> np.ndarray:
        return self.candidates[~self.single_activation]


def disaggregate(report: GradientReport, tau_b: float = BIAS_GRAD_THRESHOLD) -> ReconstructionSet:
    """Divide each weight-gradient row by its bias gradient.

    Neurons whose bias gradient is at most ``tau_b`` in magnitude yield no
    candidate. Neurons that fired for several samples give blended
    candidates; they are kept and flagged.
    """
    live = np.flatnonzero(np.abs(report.grad_b) > tau_b)
    cands = report.grad_w[live] / report.grad_b[live, None]
    single = report.activation_counts[live] == 1
    return ReconstructionSet(cands, live, single)


def invert_batchnorm(candidate, post_state: BatchNormState) -> np.ndarray:
    """Undo training-mode batch normalization after a single update step.

    The batch statistics are read back from the running estimates, which
    started at mean 0 and variance 1. When the state records the batch size
    the unbiased running variance is converted back to the biased one used
    in the forward pass.
    """
    y = np.asarray(candidate, dtype=np.float64)
    mom = post_state.momentum
    if post_state.num_batches_tracked != 1:
        raise ValueError(
            f"state has seen {post_state.num_batches_tracked} batches; inversion needs exactly 1"
        )
    mean = post_state.running_mean / mom
    var = (post_state.running_var - (1.0 - mom)) / mom
    if np.any(var <= 0):
        raise ValueError("recovered batch variance is not positive; state is not from a first step")
    b = post_state.last_batch_size
    if b is not None:
        var = var * (b - 1) / b
    return mean + (y - post_state.beta) / post_state.gamma * np.sqrt(var + post_state.eps)


def invert_layernorm(candidate, public_stats) -> np.ndarray:
    """Approximate de-normalization with public per-channel statistics.

    Each row is split into ``len(public_stats.mean)`` equal channel blocks.
    The true per-sample statistics are unknown to the server, so the result
    is only an affine approximation of the original input.
    """
    y = np.asarray(candidate, dtype=np.float64)
    mean = np.asarray(public_stats.mean, dtype=np.float64)
    std = np.asarray(public_stats.std, dtype=np.float64)
    width = y.shape[-1]
    if width % mean.shape[0]:
        raise ValueError(f"width {width} not divisible into {mean.shape[0]} channels")
    per = width // mean.shape[0]
    return y * np.repeat(std, per) + np.repeat(mean, per)


def default_tolerance(width: int) -> float:
    return 1e-6 * math.sqrt(width)


@dataclass
class MatchResult:
    b0: int
    batch_size: int
    sample_recovered: np.ndarray
    candidate_match: np.ndarray
    candidate_error: np.ndarray

    @property
    def recall(self) -> float:
        return self.b0 / self.batch_size


def match_reconstructions(candidates, ground_truth, tol: float | None = None) -> MatchResult:
    """Count distinct ground-truth samples reproduced by some candidate.

    A candidate matches its nearest ground-truth sample when the l2 distance
    is at most ``tol`` (default ``1e-6 * sqrt(M)``).
    """
    gt = np.asarray(ground_truth, dtype=np.float64)
    b, m = gt.shape
    cands = np.asarray(candidates, dtype=np.float64).reshape(-1, m)
    tol = default_tolerance(m) if tol is None else tol
    k = cands.shape[0]
    match = np.full(k, -1, dtype=np.int64)
    err = np.full(k, np.inf)
    recovered = np.zeros(b, dtype=bool)
    if k:
        # nearest by the expanded form, then the exact distance to that one
        d2 = (cands**2).sum(1)[:, None] + (gt**2).sum(1)[None, :] - 2.0 * cands @ gt.T
        nearest = d2.argmin(axis=1)
        err = np.linalg.norm(cands - gt[nearest], axis=1)
        ok = err <= tol
        match[ok] = nearest[ok]
        recovered[nearest[ok]] = True
    return MatchResult(int(recovered.sum()), b, recovered, match, err)


def write_candidates(path, candidates) -> None:
    """Binary dump: uint32 LE width, then float64 LE values row-major."""
    arr = np.asarray(candidates, dtype="<f8")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.shape[1]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_candidates(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError("truncated candidate file")
    (width,) = struct.unpack("<I", raw[:4])
    body = np.frombuffer(raw[4:], dtype="<f8")
    if width == 0 or body.size % width:
        raise ValueError("candidate file body does not match its width header")
    return body.reshape(-1, width).astype(np.float64)


def write_pnm(path, image, value_range: tuple[float, float] | None = None) -> None:
    """Write a (C, H, W) or (H, W) array as binary PPM (C=3) or PGM (C=1).

    Values are mapped from ``value_range`` (default: the image min/max) to 0..255.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("PNM export needs 1 or 3 channels")
    lo, hi = value_range if value_range is not None else (float(img.min()), float(img.max()))
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(pix.transpose(1, 2, 0)).tobytes())
