"""Command line entry point: ``gradleak {run,bounds,extract-demo,prune-demo}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import find_cifar10_dir
from .defense import AggpConfig
from .experiment import (
    ATTACKS,
    ExperimentConfig,
    _run_data,
    build_attack_layer,
    emit_report,
    evaluate_batch,
    run_grid,
)
from .extraction import write_candidates, write_pnm
from .metrics import expected_A, expected_P, expected_R
from .model import MaliciousModel
from .numerics import RngStream


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=("synthetic", "cifar10", "tokens"), default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--attack", choices=ATTACKS, default=None)
    p.add_argument("--defense", choices=("none", "aggp"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--B", type=int, default=None)
    p.add_argument("--normalization", choices=("data_norm", "batch_norm", "layer_norm"), default=None)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradleak", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid")
    _add_common(run)
    run.add_argument("--config", default=None, help="JSON experiment config")
    run.add_argument("--format", choices=("csv", "json"), default=None)
    run.add_argument("--eval", choices=("mask", "gradient"), default=None)
    run.add_argument("--runs", type=int, default=None)
    run.add_argument("--batches", type=int, default=None)
    run.add_argument("--workers", type=int, default=None)

    b = sub.add_parser("bounds", help="closed-form expectations of A, P, R")
    b.add_argument("--N", type=int, required=True)
    b.add_argument("--B", type=int, required=True)

    for name, text in (("extract-demo", "one attack + extraction, exporting images"),
                       ("prune-demo", "leakage before and after AGGP")):
        d = sub.add_parser(name, help=text)
        _add_common(d)
    return parser


def _resolve_data_dir(args) -> str | None:
    return args.data_dir or os.environ.get("GRADLEAK_DATA_DIR")


def _cmd_run(args) -> int:
    raw: dict = {}
    if args.config:
        import json

        raw = json.loads(Path(args.config).read_text())
    overrides = {
        "dataset": args.dataset, "attack": args.attack, "defense": args.defense,
        "base_seed": args.seed, "normalization": args.normalization, "eval": args.eval,
        "runs": args.runs, "batches_per_run": args.batches, "workers": args.workers,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    data_dir = _resolve_data_dir(args)
    if data_dir:
        raw["data_dir"] = data_dir
    if args.N is not None or args.B is not None:
        if args.N is None or args.B is None:
            raise SystemExit("run: --N and --B must be given together")
        raw["grid"] = [[args.N, args.B]]
    if "grid" not in raw:
        raise SystemExit("run: need --config or --N/--B")
    cfg = ExperimentConfig.from_dict(raw)
    report = run_grid(cfg)
    written = []
    if args.out:
        fmt = args.format or ("json" if args.out.endswith(".json") else "csv")
        written.append(emit_report(report, fmt, args.out))
    else:
        if cfg.output_csv:
            written.append(emit_report(report, "csv", cfg.output_csv))
        if cfg.output_json:
            written.append(emit_report(report, "json", cfg.output_json))
    if not written:
        sys.stdout.write(report.to_csv() if args.format != "json" else report.to_json() + "\n")
    for p in written:
        print(f"wrote {p}", file=sys.stderr)
    return 0


def _cmd_bounds(args) -> int:
    if args.B < 1 or args.N < 0:
        print("bounds: need N >= 0 and B >= 1", file=sys.stderr)
        return 2
    print(f"N {args.N} B {args.B}")
    print(f"expA {expected_A(args.B):.3f}")
    print(f"expP {expected_P(args.B):.3f}")
    print(f"expR {expected_R(args.N, args.B):.3f}")
    return 0


def _demo_setup(args):
    cfg = ExperimentConfig(
        grid=[(args.N or 200, args.B or 20)],
        dataset=args.dataset or "synthetic",
        data_dir=_resolve_data_dir(args),
        attack=args.attack or "qbi",
        normalization=args.normalization or "data_norm",
        batches_per_run=1,
        runs=1,
        base_seed=args.seed if args.seed is not None else 0,
    )
    n, b = cfg.grid[0]
    rng = RngStream(cfg.base_seed)
    xs, ys, aux = _run_data(cfg, n, b, rng)
    layer = build_attack_layer(cfg.attack, n, b, xs[0].shape[1], rng, aux, cfg.pairs_retries, cfg.trap_shift)
    model = MaliciousModel.build(layer, rng, num_classes=cfg.classes, norm=cfg.normalization)
    return cfg, model, xs[0], ys[0], rng


def _export(out_dir: Path, cfg: ExperimentConfig, batch, outcome, tag: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if outcome.candidates is not None and len(outcome.candidates):
        write_candidates(out_dir / f"{tag}_candidates.bin", outcome.candidates)
    if cfg.dataset == "tokens":
        return
    c, h, w = cfg.shape
    lo, hi = float(np.min(batch)), float(np.max(batch))
    for i, x in enumerate(batch):
        if outcome.recovered is not None and outcome.recovered[i]:
            img = x
        else:
            # unrecovered samples are exported black
            img = np.full_like(x, lo)
        write_pnm(out_dir / f"{tag}_{i:03d}.ppm", img.reshape(c, h, w), (lo, hi))


def _cmd_extract_demo(args) -> int:
    cfg, model, x, y, rng = _demo_setup(args)
    res = evaluate_batch(model, x, y, "gradient")
    b = x.shape[0]
    k = int(res.recovered.sum())
    print(f"attack {cfg.attack} N {cfg.grid[0][0]} B {b}: recovered {k}/{b} ({100.0 * k / b:.1f}%)")
    if args.out:
        _export(Path(args.out), cfg, x, res, "recovered")
    return 0


def _cmd_prune_demo(args) -> int:
    cfg, model, x, y, rng = _demo_setup(args)
    before = evaluate_batch(model, x, y, "gradient")
    after = evaluate_batch(model, x, y, "gradient", AggpConfig(), rng)
    b = x.shape[0]
    print(f"without AGGP: recovered {int(before.recovered.sum())}/{b} (R={before.R:.3f})")
    print(f"with AGGP:    recovered {int(after.recovered.sum())}/{b} (R={after.R:.3f})")
    if args.out:
        _export(Path(args.out), cfg, x, before, "before")
        _export(Path(args.out), cfg, x, after, "after")
    return 0


COMMANDS = {
    "run": _cmd_run,
    "bounds": _cmd_bounds,
    "extract-demo": _cmd_extract_demo,
    "prune-demo": _cmd_prune_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 2
        return int(exc.code or 0)
    except Exception as exc:  # runtime failure -> exit 1
        print(f"gradleak {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
