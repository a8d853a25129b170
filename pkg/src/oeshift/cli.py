"""Command-line entry point: ``oeshift run|mine-outliers|grid|metrics``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics as mt
from .config import ConfigError, parse_config
from .experiment import TrainingAbort, grid_from_checkpoint, mine_outliers, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oeshift", description="Outlier Exposure experiments under distribution shift")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate per a YAML config")
    run.add_argument("config")
    mine = sub.add_parser("mine-outliers", help="write the KL outlier manifest for a config")
    mine.add_argument("config")
    for sp in (run, mine):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--trials", type=int)

    grid = sub.add_parser("grid", help="probability grid from a saved toy checkpoint")
    grid.add_argument("checkpoint")
    grid.add_argument("bounds", help="lo,hi, or a half-width h for [-h, h]; put -- before a negative lo")
    grid.add_argument("resolution", type=int, help="points per axis")
    grid.add_argument("out")

    met = sub.add_parser("metrics", help="metrics from a predictions CSV (label,score[,prediction])")
    met.add_argument("predictions")
    met.add_argument("out_dir")
    met.add_argument("--positive-class", type=int, default=1)
    met.add_argument("--threshold", type=float, default=0.5)
    return p


def _load_config(args):
    cfg = parse_config(args.config)
    try:
        return cfg.with_overrides(seed=args.seed, out=args.out, trials=args.trials)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _parse_bounds(text: str) -> tuple[float, float]:
    parts = text.split(",")
    try:
        values = [float(v) for v in parts]
    except ValueError:
        raise ConfigError(f"bad grid bounds {text!r}") from None
    if len(values) == 1:
        return -abs(values[0]), abs(values[0])
    if len(values) != 2:
        raise ConfigError(f"bad grid bounds {text!r}; expected lo,hi")
    return values[0], values[1]


def _cmd_metrics(args) -> None:
    labels, scores, preds = [], [], []
    with open(args.predictions, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"label", "score"} <= set(reader.fieldnames):
            raise ConfigError(f"{args.predictions}: header must include label and score")
        has_pred = "prediction" in reader.fieldnames
        for row in reader:
            labels.append(int(row["label"]))
            scores.append(float(row["score"]))
            if has_pred:
                preds.append(int(row["prediction"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = mt.evaluate(scores, labels, args.positive_class, args.threshold, predictions=preds or None)
    mt.write_metrics_csv(out / "metrics.csv", report)
    mt.write_confusion_csv(out / "confusion.csv", report.confusion)
    try:
        curve, _ = mt.roc_auc(np.asarray(scores), np.asarray(labels), args.positive_class)
        mt.write_roc_csv(out / "roc.csv", curve)
    except mt.MetricsError as exc:
        logging.warning("no ROC curve: %s", exc)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            result = run_experiment(_load_config(args))
            print(f"wrote {len(result.files)} files under {result.out_dir}")
            return EXIT_RUNTIME if result.failed else EXIT_OK
        if args.command == "mine-outliers":
            manifest, oe = mine_outliers(_load_config(args))
            print(f"{len(oe)} outliers -> {manifest}")
        elif args.command == "grid":
            lo, hi = _parse_bounds(args.bounds)
            print(grid_from_checkpoint(args.checkpoint, (lo, hi), args.resolution, args.out))
        elif args.command == "metrics":
            _cmd_metrics(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
