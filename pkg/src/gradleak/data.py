"""Dataset providers and normalization."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import RngStream

__all__ = [
    "CIFAR10_RECORD",
    "Dataset",
    "Layout",
    "NormalizationStats",
    "cifar10_available",
    "cifar10_load",
    "cifar10_write",
    "compute_stats",
    "denormalize",
    "detokenize",
    "find_cifar10_dir",
    "normalize",
    "sample_batches",
    "synthetic_gaussian",
    "synthetic_tokens",
]

CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True)
class Layout:
    channels: int
    height: int = 1
    width: int = 1
    seq_len: int | None = None
    embed_dim: int | None = None

    @property
    def size(self) -> int:
        if self.seq_len is not None:
            return self.seq_len * self.embed_dim
        return self.channels * self.height * self.width


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if mean.shape != std.shape:
            raise ValueError("mean and std must have the same length")
        if np.any(std <= 0):
            raise ValueError("std entries must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    layout: Layout
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.samples.ndim != 2:
            raise ValueError("samples must be 2-D (rows are flattened samples)")
        if self.labels.shape[0] != self.samples.shape[0]:
            raise ValueError("label count differs from sample count")
        if self.samples.shape[1] != self.layout.size:
            raise ValueError(f"feature width {self.samples.shape[1]} != layout size {self.layout.size}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> Dataset:
        return replace(self, samples=self.samples[idx], labels=self.labels[idx])


def synthetic_gaussian(n: int, shape: tuple[int, ...], rng: RngStream, num_classes: int = 10) -> Dataset:
    """``n`` samples of i.i.d. N(0, 1) features with uniform random labels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = tuple(shape)
    layout = Layout(*shape) if len(shape) == 3 else Layout(1, 1, int(np.prod(shape)))
    x = rng.normal((n, layout.size))
    y = rng.integers(0, num_classes, size=n)
    return Dataset(x, y, layout)


def synthetic_tokens(
    n: int, seq_len: int, vocab: int, embed_dim: int, rng: RngStream, num_classes: int = 2
) -> Dataset:
    """Random token sequences embedded through a fixed N(0, 1) table.

    The table and token ids are kept in ``extras`` for :func:`detokenize`.
    """
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    table = rng.normal((vocab, embed_dim))
    tokens = rng.integers(0, vocab, size=(n, seq_len))
    samples = table[tokens].reshape(n, seq_len * embed_dim)
    labels = rng.integers(0, num_classes, size=n)
    layout = Layout(1, seq_len=seq_len, embed_dim=embed_dim)
    return Dataset(samples, labels, layout, {"embedding": table, "tokens": tokens})


def detokenize(flat, table: np.ndarray) -> np.ndarray:
    """Map flattened embeddings back to token ids by nearest table row."""
    table = np.asarray(table, dtype=np.float64)
    rows = np.asarray(flat, dtype=np.float64).reshape(-1, table.shape[1])
    d2 = (rows**2).sum(1)[:, None] + (table**2).sum(1)[None, :] - 2.0 * rows @ table.T
    return d2.argmin(axis=1)


def _parse_cifar(raw: bytes, source: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR10_RECORD:
        raise ValueError(f"{source}: size {len(raw)} is not a multiple of {CIFAR10_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"{source}: label {labels.max()} > 9")
    return rec[:, 1:].astype(np.float64) / 255.0, labels


def find_cifar10_dir(path=None) -> Path | None:
    """Locate the directory holding the CIFAR-10 binary batches.

    Looks at ``path`` (or ``$GRADLEAK_DATA_DIR``) and its
    ``cifar-10-batches-bin`` subdirectory.
    """
    base = path if path is not None else os.environ.get("GRADLEAK_DATA_DIR")
    if not base:
        return None
    base = Path(base)
    for cand in (base, base / "cifar-10-batches-bin"):
        if (cand / CIFAR10_TEST_FILES[0]).is_file() or (cand / CIFAR10_TRAIN_FILES[0]).is_file():
            return cand
    return None


def cifar10_available(path=None) -> bool:
    d = find_cifar10_dir(path)
    return d is not None and all((d / f).is_file() for f in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES)


def cifar10_load(path, split: str = "train") -> Dataset:
    """Load CIFAR-10 binary records, pixels scaled to [0, 1].

    ``path`` is a batch file or a directory containing the standard
    ``data_batch_*.bin`` / ``test_batch.bin`` files. ``split`` is
    ``"train"``, ``"test"`` or ``"all"``.
    """
    p = Path(path)
    if p.is_file():
        files = [p]
    else:
        d = find_cifar10_dir(p)
        if d is None:
            raise FileNotFoundError(f"no CIFAR-10 binary batches under {p}")
        names = {"train": CIFAR10_TRAIN_FILES, "test": CIFAR10_TEST_FILES,
                 "all": CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES}[split]
        files = [d / n for n in names]
        missing = [str(f) for f in files if not f.is_file()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    xs, ys = zip(*(_parse_cifar(f.read_bytes(), str(f)) for f in files))
    return Dataset(np.concatenate(xs), np.concatenate(ys), Layout(3, 32, 32))


def cifar10_write(path, dataset: Dataset) -> None:
    """Write samples in [0, 1] as CIFAR-10 binary records."""
    if dataset.layout != Layout(3, 32, 32):
        raise ValueError("CIFAR-10 records need a 3x32x32 layout")
    if dataset.labels.size and (dataset.labels.min() < 0 or dataset.labels.max() > 9):
        raise ValueError("labels must lie in 0..9")
    pix = np.clip(np.rint(dataset.samples * 255.0), 0, 255).astype(np.uint8)
    rec = np.empty((len(dataset), CIFAR10_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = pix
    Path(path).write_bytes(rec.tobytes())


def _channel_view(dataset: Dataset, stats: NormalizationStats) -> tuple[np.ndarray, np.ndarray]:
    c = dataset.layout.channels
    if stats.mean.shape[0] != c:
        raise ValueError(f"stats have {stats.mean.shape[0]} channels, layout has {c}")
    per = dataset.width // c
    return np.repeat(stats.mean, per), np.repeat(stats.std, per)


def compute_stats(dataset: Dataset) -> NormalizationStats:
    """Per-channel mean and standard deviation over all samples."""
    c = dataset.layout.channels
    x = dataset.samples.reshape(len(dataset), c, -1)
    return NormalizationStats(x.mean(axis=(0, 2)), x.std(axis=(0, 2)))


def normalize(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    mean, std = _channel_view(dataset, stats)
    return replace(dataset, samples=(dataset.samples - mean) / std)


def denormalize(dataset: Dataset, stats: NormalizationStats) -> Dataset:
    mean, std = _channel_view(dataset, stats)
    return replace(dataset, samples=dataset.samples * std + mean)


def sample_batches(n_samples: int, batch_size: int, count: int, rng: RngStream) -> list[np.ndarray]:
    """Index arrays for ``count`` batches drawn without replacement.

    A fresh permutation is started whenever the current one runs out.
    """
    if batch_size > n_samples:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n_samples}")
    out = []
    perm = rng.permutation(n_samples)
    pos = 0
    for _ in range(count):
        if pos + batch_size > n_samples:
            perm = rng.permutation(n_samples)
            pos = 0
        out.append(perm[pos:pos + batch_size])
        pos += batch_size
    return out
