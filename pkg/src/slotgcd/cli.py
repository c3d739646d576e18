"""Command-line surface: train, eval, sweep, export, and make-split."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .data import build_split, load_index, load_split, save_split
from .errors import ConfigurationError, DataError, NumericError
from .evaluation import evaluate_embeddings
from .train import (evaluate_checkpoint, export_embeddings, load_embeddings,
                    parse_grid, sweep, train)

_EXIT_CODES = [
    (ConfigurationError, "config", 2),
    (DataError, "data", 3),
    (NumericError, "numeric", 4),
    (OSError, "io", 5),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotgcd",
                                     description="Category discovery with adaptive slot attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--embeddings", help="evaluate an exported embedding file instead")
    p_eval.add_argument("--split", required=True)
    p_eval.add_argument("--k", type=int, required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", help="optional path for an instance,cluster CSV")

    p_sweep = sub.add_parser("sweep", help="train/evaluate one run per grid row")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True)
    p_sweep.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p_export = sub.add_parser("export", help="dump g_all embeddings for a split")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--split", help="defaults to the checkpoint's training split")
    p_export.add_argument("--seed", type=int, default=0)

    p_split = sub.add_parser("make-split", help="build a labeled/unlabeled split from an index")
    p_split.add_argument("--index", required=True)
    p_split.add_argument("--known", required=True,
                         help="fraction in (0,1] or comma-separated class ids")
    p_split.add_argument("--frac", type=float, default=0.5)
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", default="split.txt")
    return parser


def _parse_known(text: str):
    try:
        return float(text)
    except ValueError:
        return [int(tok) for tok in text.split(",")]


def _cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    checkpoint = train(config)
    final = checkpoint.history["epochs"][-1]
    print(f"trained {checkpoint.epoch} epochs; "
          f"final overall loss {final['overall']:.4f} "
          f"(checkpoint in {config.out_dir})")
    return 0


def _cmd_eval(args) -> int:
    split, labels = load_split(args.split)
    if args.embeddings:
        embeddings, file_labels, _ = load_embeddings(args.embeddings)
        report = evaluate_embeddings(embeddings, file_labels or labels, split,
                                     args.k, seed=args.seed)
    elif args.checkpoint:
        report = evaluate_checkpoint(args.checkpoint, split, args.k, seed=args.seed)
    else:
        raise ConfigurationError("eval needs --checkpoint or --embeddings")
    print(report.to_record())
    if args.out:
        report.save_assignments(args.out)
    if args.checkpoint:
        _append_report(args.checkpoint, report)
    return 0


def _append_report(checkpoint_path: str, report) -> None:
    log = Path(checkpoint_path).parent / "metrics.log"
    with open(log, "a") as fh:
        fh.write(report.to_record().replace("\n", " ") + "\n")


def _cmd_sweep(args) -> int:
    config = load_config(args.config, args.set)
    grid = parse_grid(args.grid)
    results = sweep(config, grid)
    print(f"{'configuration':<48} {'All':>6} {'Old':>6} {'New':>6}")
    for overrides, report in results:
        name = " ".join(overrides)
        print(f"{name:<48} {report.acc_all:6.3f} {report.acc_old:6.3f} {report.acc_new:6.3f}")
    return 0


def _cmd_export(args) -> int:
    split = load_split(args.split)[0] if args.split else None
    out = export_embeddings(args.checkpoint, split, args.out, seed=args.seed)
    print(f"wrote {out}")
    return 0


def _cmd_make_split(args) -> int:
    rows = load_index(args.index)
    index = [(instance_id, class_id) for instance_id, _, class_id in rows]
    spec = build_split(index, _parse_known(args.known), args.frac, args.seed)
    labels = {instance_id: class_id for instance_id, class_id in index}
    save_split(spec, labels, args.out)
    print(f"wrote {args.out}: {len(spec.labeled_ids)} labeled, "
          f"{len(spec.unlabeled_ids)} unlabeled, "
          f"{len(spec.known_classes)} known classes")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "export": _cmd_export,
    "make-split": _cmd_make_split,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except tuple(cls for cls, _, _ in _EXIT_CODES) as exc:
        for cls, category, code in _EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {category}: {exc}", file=sys.stderr)
                return code
        raise  # unreachable
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
