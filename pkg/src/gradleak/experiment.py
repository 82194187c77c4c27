"""Experiment harness: seeded grids of attack/defense runs and their reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .attack import PairsParams, QbiParams, benign_init, pairs_init, qbi_init, trap_weights_init
from .data import (
    Dataset,
    compute_stats,
    cifar10_load,
    find_cifar10_dir,
    normalize,
    synthetic_tokens,
)
from .defense import AggpConfig, aggp_prune
from .extraction import disaggregate, invert_batchnorm, match_reconstructions
from .metrics import aggregate_ci, expected_A, expected_P, expected_R, metrics_from_mask
from .model import LinearLayer, MaliciousModel, compute_gradients, forward
from .numerics import RngStream

__all__ = [
    "ATTACKS",
    "CSV_COLUMNS",
    "BatchOutcome",
    "CellResult",
    "ExperimentConfig",
    "ExperimentReport",
    "build_attack_layer",
    "derive_seed",
    "emit_report",
    "evaluate_batch",
    "run_grid",
]

log = logging.getLogger(__name__)

ATTACKS = ("qbi", "pairs", "trap_weights", "none")
DEFENSES = ("none", "aggp")
DATASETS = ("synthetic", "cifar10", "tokens")
NORMALIZATIONS = ("data_norm", "batch_norm", "layer_norm")
EVAL_MODES = ("mask", "gradient")
CSV_COLUMNS = (
    "N", "B", "attack", "defense", "A_mean", "A_ci", "P_mean", "P_ci",
    "R_mean", "R_ci", "expA", "expP", "expR", "runs", "seed",
)


@dataclass
class ExperimentConfig:
    grid: list[tuple[int, int]]
    dataset: str = "synthetic"
    data_dir: str | None = None
    shape: tuple[int, int, int] = (3, 32, 32)
    seq_len: int = 250
    vocab: int = 10_000
    embed_dim: int = 250
    attack: str = "qbi"
    defense: str = "none"
    runs: int = 10
    batches_per_run: int = 10
    base_seed: int = 0
    normalization: str = "data_norm"
    eval: str = "mask"
    pairs_retries: int = 1000
    trap_shift: float = 0.1
    aggp: AggpConfig = field(default_factory=AggpConfig)
    num_classes: int | None = None
    workers: int = 1
    output_csv: str | None = None
    output_json: str | None = None

    def __post_init__(self):
        self.grid = [(int(n), int(b)) for n, b in self.grid]
        self.shape = tuple(int(v) for v in self.shape)
        if not self.grid:
            raise ValueError("grid must contain at least one (N, B) pair")
        if self.runs < 1 or self.batches_per_run < 1:
            raise ValueError("runs and batches_per_run must be >= 1")
        for name, value, allowed in (
            ("dataset", self.dataset, DATASETS),
            ("attack", self.attack, ATTACKS),
            ("defense", self.defense, DEFENSES),
            ("normalization", self.normalization, NORMALIZATIONS),
            ("eval", self.eval, EVAL_MODES),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")
        for n, b in self.grid:
            if n < 1 or b < 2:
                raise ValueError(f"invalid grid cell (N={n}, B={b})")
        if isinstance(self.aggp, dict):
            self.aggp = AggpConfig(**self.aggp)

    @property
    def classes(self) -> int:
        if self.num_classes is not None:
            return self.num_classes
        return 2 if self.dataset == "tokens" else 10

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        aggp = dict(raw.pop("aggp", {}) or {})
        for key in [k for k in raw if k.startswith("aggp.")]:
            aggp[key.split(".", 1)[1]] = raw.pop(key)
        output = raw.pop("output", None) or {}
        raw.setdefault("output_csv", output.get("csv"))
        raw.setdefault("output_json", output.get("json"))
        if isinstance(raw.get("dataset"), dict):
            ds = raw.pop("dataset")
            raw["dataset"] = ds.get("name", "synthetic")
            for k in ("data_dir", "shape", "seq_len", "vocab", "embed_dim"):
                if k in ds:
                    raw[k] = ds[k]
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(aggp=AggpConfig(**aggp), **raw)

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_seed(base_seed: int, cell_index: int, run_index: int) -> np.random.SeedSequence:
    """Independent stream per (cell, run) without any coordination."""
    return np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(cell_index), int(run_index)))


# ---------------------------------------------------------------------------
# attack construction and single-batch evaluation


def build_attack_layer(
    attack: str,
    n_neurons: int,
    batch_size: int,
    width: int,
    rng: RngStream,
    auxiliary: np.ndarray | None = None,
    pairs_retries: int = 1000,
    trap_shift: float = 0.1,
) -> LinearLayer:
    blank = LinearLayer.zeros(n_neurons, width)
    if attack == "none":
        return benign_init(blank, rng)
    if attack == "trap_weights":
        return trap_weights_init(blank, trap_shift, rng)
    layer = qbi_init(blank, QbiParams(batch_size, width), rng)
    if attack == "qbi":
        return layer
    if attack == "pairs":
        if auxiliary is None:
            raise ValueError("PAIRS needs auxiliary data")
        return pairs_init(layer, PairsParams(auxiliary, batch_size, pairs_retries), rng)
    raise ValueError(f"unknown attack {attack!r}")


@dataclass
class BatchOutcome:
    A: float
    P: float
    R: float
    R_mask: float
    candidates: np.ndarray | None = None
    recovered: np.ndarray | None = None


def evaluate_batch(
    model: MaliciousModel,
    batch: np.ndarray,
    labels: np.ndarray,
    mode: str = "mask",
    defense: AggpConfig | None = None,
    rng: RngStream | None = None,
) -> BatchOutcome:
    """One client step on ``batch`` and the resulting A, P, R.

    In ``"mask"`` mode recall is read from the activation pattern. In
    ``"gradient"`` mode (forced when a defense is given) the server
    disaggregates the shared gradients and matches them against the input:
    against the raw batch after inverting batch norm, against the
    normalized input otherwise.
    """
    trace = forward(model, batch)
    m = metrics_from_mask(trace.activation_mask)
    if mode == "mask" and defense is None:
        return BatchOutcome(m.A, m.P, m.R, m.R)
    report = compute_gradients(model, batch, labels, trace=trace)
    if defense is not None:
        report = aggp_prune(report, defense, rng)
    recon = disaggregate(report)
    cands = recon.candidates
    truth = trace.layer_input
    if trace.norm_state is not None:
        cands = invert_batchnorm(cands, trace.norm_state)
        truth = np.asarray(batch, dtype=np.float64)
    match = match_reconstructions(cands, truth)
    return BatchOutcome(m.A, m.P, match.recall, m.R, cands, match.sample_recovered)


# ---------------------------------------------------------------------------
# data sources


@lru_cache(maxsize=2)
def _cifar_pool(data_dir: str | None) -> Dataset:
    d = find_cifar10_dir(data_dir)
    if d is None:
        raise FileNotFoundError(
            f"CIFAR-10 binary batches not found (data_dir={data_dir!r}, GRADLEAK_DATA_DIR unset or wrong)"
        )
    return cifar10_load(d, "all")


def _run_data(cfg: ExperimentConfig, n_neurons: int, batch_size: int, rng: RngStream):
    """Evaluation batches and auxiliary data for one run.

    Returns (batches, labels, auxiliary) where batches are what the client
    feeds to the model (already normalized in ``data_norm`` mode).
    """
    need_aux = cfg.attack == "pairs"
    nb = cfg.batches_per_run
    if cfg.dataset == "synthetic":
        width = int(np.prod(cfg.shape))
        xs = [rng.normal((batch_size, width)) for _ in range(nb)]
        ys = [rng.integers(0, cfg.classes, size=batch_size) for _ in range(nb)]
        aux = rng.normal((n_neurons, width)) if need_aux else None
        return xs, ys, aux
    if cfg.dataset == "tokens":
        total = nb * batch_size + (n_neurons if need_aux else 0)
        ds = synthetic_tokens(total, cfg.seq_len, cfg.vocab, cfg.embed_dim, rng, cfg.classes)
        xs = [ds.samples[i * batch_size:(i + 1) * batch_size] for i in range(nb)]
        ys = [ds.labels[i * batch_size:(i + 1) * batch_size] for i in range(nb)]
        aux = ds.samples[nb * batch_size:] if need_aux else None
        return xs, ys, aux
    pool = _cifar_pool(cfg.data_dir)
    perm = rng.permutation(len(pool))
    n_train = len(pool) * 5 // 6
    train, test = pool.subset(perm[:n_train]), pool.subset(perm[n_train:])
    if cfg.normalization == "data_norm":
        stats = compute_stats(train)
        train, test = normalize(train, stats), normalize(test, stats)
    if nb * batch_size > len(test):
        raise ValueError("not enough test samples for the requested batches")
    xs = [test.samples[i * batch_size:(i + 1) * batch_size] for i in range(nb)]
    ys = [test.labels[i * batch_size:(i + 1) * batch_size] for i in range(nb)]
    aux = train.samples[:n_neurons] if need_aux else None
    return xs, ys, aux


def _run_one(cfg: ExperimentConfig, cell: int, run: int) -> tuple[list[tuple[float, float, float]], int]:
    n_neurons, batch_size = cfg.grid[cell]
    seq = derive_seed(cfg.base_seed, cell, run)
    rng = RngStream(seq)
    xs, ys, aux = _run_data(cfg, n_neurons, batch_size, rng)
    width = xs[0].shape[1]
    layer = build_attack_layer(
        cfg.attack, n_neurons, batch_size, width, rng, aux, cfg.pairs_retries, cfg.trap_shift
    )
    model = MaliciousModel.build(layer, rng, num_classes=cfg.classes, norm=cfg.normalization)
    defense = cfg.aggp if cfg.defense == "aggp" else None
    out = []
    for x, y in zip(xs, ys):
        res = evaluate_batch(model, x, y, cfg.eval, defense, rng)
        out.append((res.A, res.P, res.R))
    return out, rng.seed


# ---------------------------------------------------------------------------
# reports


@dataclass
class CellResult:
    N: int
    B: int
    attack: str
    defense: str
    A_mean: float
    A_ci: float
    P_mean: float
    P_ci: float
    R_mean: float
    R_ci: float
    expA: float
    expP: float
    expR: float
    runs: int
    seed: int
    run_means: list[list[float]] = field(default_factory=list)
    run_seeds: list[int] = field(default_factory=list)
    wall_clock: float = 0.0


@dataclass
class ExperimentReport:
    cells: list[CellResult]
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def cell(self, n_neurons: int, batch_size: int) -> CellResult:
        for c in self.cells:
            if (c.N, c.B) == (n_neurons, batch_size):
                return c
        raise KeyError((n_neurons, batch_size))

    def to_dict(self) -> dict:
        return {"config": self.config, "wall_clock": self.wall_clock,
                "cells": [asdict(c) for c in self.cells]}

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentReport:
        cells = [CellResult(**{k: (math.nan if v is None else v) if k.endswith("_ci") else v
                               for k, v in c.items()}) for c in raw["cells"]]
        return cls(cells, raw.get("config", {}), raw.get("wall_clock", 0.0))

    def to_json(self) -> str:
        d = self.to_dict()
        for c in d["cells"]:
            for k in ("A_ci", "P_ci", "R_ci"):
                if isinstance(c[k], float) and math.isnan(c[k]):
                    c[k] = None
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cells:
            row = []
            for col in CSV_COLUMNS:
                v = getattr(c, col)
                row.append(f"{v:.6f}" if isinstance(v, float) else v)
            w.writerow(row)
        return buf.getvalue()


def _config_summary(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["grid"] = [list(g) for g in cfg.grid]
    d["shape"] = list(cfg.shape)
    return d


def run_grid(config: ExperimentConfig, workers: int | None = None) -> ExperimentReport:
    """Evaluate every (N, B) cell over ``runs`` seeded initializations.

    Each run is averaged over its batches; the cell reports the mean over
    runs with a 95% half-width. Results depend only on the config, not on
    the number of workers.
    """
    workers = config.workers if workers is None else workers
    if config.dataset == "cifar10":
        if find_cifar10_dir(config.data_dir) is None:
            raise FileNotFoundError("CIFAR-10 dataset not found; set --data-dir or GRADLEAK_DATA_DIR")
    tasks = [(cell, run) for cell in range(len(config.grid)) for run in range(config.runs)]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, config, c, r) for c, r in tasks]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(config, c, r) for c, r in tasks]
    by_task = dict(zip(tasks, results))
    cells = []
    for ci, (n, b) in enumerate(config.grid):
        per_run = [by_task[(ci, r)] for r in range(config.runs)]
        means = np.array([np.mean(vals, axis=0) for vals, _ in per_run])
        stats = []
        for k in range(3):
            if config.runs >= 2:
                stats.extend(aggregate_ci(means[:, k]))
            else:
                stats.extend((float(means[0, k]), math.nan))
        cells.append(CellResult(
            n, b, config.attack, config.defense, *stats,
            expected_A(b), expected_P(b), expected_R(n, b), config.runs, config.base_seed,
            run_means=means.tolist(), run_seeds=[s for _, s in per_run],
        ))
        log.info("cell N=%d B=%d: R=%.4f", n, b, stats[4])
    return ExperimentReport(cells, _config_summary(config), time.perf_counter() - t0)


def emit_report(report: ExperimentReport, fmt: str, path) -> Path:
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    text = report.to_csv() if fmt == "csv" else report.to_json() + "\n"
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return p
