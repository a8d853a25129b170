"""Binary classification metrics: confusion counts, precision/recall/F1, ROC and AUROC.

Undefined ratios (zero denominators) are reported as ``None`` and written as
``NA``; they are never replaced by 0 or 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "ConfusionMatrix",
    "MetricsError",
    "MetricsReport",
    "RocCurve",
    "confusion",
    "evaluate",
    "roc_auc",
    "scores_from_confusion",
    "write_confusion_csv",
    "write_metrics_csv",
    "write_roc_csv",
]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    positive_class: int = 1

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """Same counts seen with the other class as positive."""
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp, 1 - self.positive_class)


@dataclass(frozen=True)
class MetricsReport:
    precision: Optional[float]
    recall: Optional[float]
    accuracy: Optional[float]
    f1: Optional[float]
    auroc: Optional[float]
    confusion: ConfusionMatrix

    def as_row(self) -> dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in ("precision", "recall", "accuracy", "f1", "auroc")}


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def confusion(predictions, labels, positive_class: int = 1) -> ConfusionMatrix:
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise MetricsError(f"{pred.size} predictions vs {true.size} labels")
    pp = pred == positive_class
    ap = true == positive_class
    return ConfusionMatrix(
        tp=int(np.sum(pp & ap)),
        fp=int(np.sum(pp & ~ap)),
        fn=int(np.sum(~pp & ap)),
        tn=int(np.sum(~pp & ~ap)),
        positive_class=positive_class,
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def scores_from_confusion(cm: ConfusionMatrix) -> tuple[Optional[float], Optional[float], Optional[float], Optional[float]]:
    """(precision, recall, accuracy, f1); ``None`` marks an undefined value."""
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    accuracy = _ratio(cm.tp + cm.tn, cm.total)
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, accuracy, f1


def roc_auc(scores, labels, positive_class: int = 1) -> tuple[RocCurve, float]:
    """Step ROC over every distinct threshold and its trapezoid area.

    Tied scores share one threshold, so the area equals the Mann-Whitney
    statistic with ties counted as one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) == positive_class
    if s.shape != y.shape:
        raise MetricsError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise MetricsError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC needs both classes present in the labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thresholds = np.r_[np.inf, s[ends]]
    curve = RocCurve(fpr, tpr, thresholds)
    return curve, curve.area()


def evaluate(probs_positive, labels, positive_class: int = 1, threshold: float = 0.5, predictions=None) -> MetricsReport:
    """Full report from positive-class probabilities (predictions default to ``p >= threshold``)."""
    p = np.asarray(probs_positive, dtype=np.float64)
    y = np.asarray(labels)
    if predictions is None:
        predictions = np.where(p >= threshold, positive_class, 1 - positive_class)
    cm = confusion(predictions, y, positive_class)
    precision, recall, accuracy, f1 = scores_from_confusion(cm)
    try:
        _, auroc = roc_auc(p, y, positive_class)
    except MetricsError:
        auroc = None
    return MetricsReport(precision, recall, accuracy, f1, auroc, cm)


def fmt(value: Optional[float], places: int = 6) -> str:
    return "NA" if value is None else f"{value:.{places}f}"


def write_metrics_csv(path: str | Path, report: MetricsReport) -> None:
    row = report.as_row()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([fmt(v) for v in row.values()])


def write_confusion_csv(path: str | Path, cm: ConfusionMatrix) -> None:
    pos, neg = cm.positive_class, 1 - cm.positive_class
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["predicted", "actual", "count"])
        w.writerow([pos, pos, cm.tp])
        w.writerow([pos, neg, cm.fp])
        w.writerow([neg, pos, cm.fn])
        w.writerow([neg, neg, cm.tn])


def write_roc_csv(path: str | Path, curve: RocCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in zip(curve.thresholds, curve.fpr, curve.tpr):
            w.writerow([repr(float(t)) if np.isinf(t) else f"{t:.12g}", f"{f:.12g}", f"{r:.12g}"])
