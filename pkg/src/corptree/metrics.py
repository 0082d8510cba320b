"""Classification metrics: accuracy, confusion, one-vs-rest and averaged ROC.

ROC curves use a descending threshold sweep in which samples sharing a score
move in one combined step, making the trapezoidal AUC equal to the
tie-corrected Mann-Whitney statistic divided by (positives x negatives).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateClass


@dataclass(frozen=True)
class RocCurve:
    """ROC points from (0,0) to (1,1) with per-point score thresholds."""

    points: tuple[tuple[float, float], ...]  # (fpr, tpr), fpr non-decreasing
    thresholds: tuple[float, ...]
    auc: float


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = true, cols = predicted

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise DataError("preds and labels must be nonempty and equal-length")
    return float((preds == labels).mean())


def confusion(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DataError("preds and labels must be equal-length")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _binary_roc(scores: np.ndarray, positive: np.ndarray) -> RocCurve:
    """Threshold sweep over descending unique scores, ties stepped jointly."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = positive[order]

    points = [(0.0, 0.0)]
    thresholds = [math.inf]
    tp = fp = 0
    i = 0
    while i < sorted_scores.size:
        j = i
        while j < sorted_scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_pos[i:j].sum())
        fp += (j - i) - int(sorted_pos[i:j].sum())
        points.append((fp / n_neg, tp / n_pos))
        thresholds.append(float(sorted_scores[i]))
        i = j

    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return RocCurve(points=tuple(points), thresholds=tuple(thresholds), auc=float(auc))


def roc_one_vs_rest(scores: np.ndarray, labels, class_index: int) -> RocCurve:
    """ROC treating ``class_index`` as positive, scored by its probability column."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    positive = labels == class_index
    if not positive.any() or positive.all():
        raise DegenerateClass(class_index)
    return _binary_roc(scores[:, class_index], positive)


def micro_average_roc(scores: np.ndarray, labels) -> RocCurve:
    """Binary ROC over all flattened (sample, class) score/indicator pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = scores.shape
    onehot = np.zeros((n, c), dtype=bool)
    onehot[np.arange(n), labels] = True
    return _binary_roc(scores.ravel(), onehot.ravel())


def macro_average_roc(scores: np.ndarray, labels) -> RocCurve:
    """Unweighted average of per-class TPR on the union FPR grid."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    curves = []
    for c in range(scores.shape[1]):
        try:
            curves.append(roc_one_vs_rest(scores, labels, c))
        except DegenerateClass:
            continue
    if not curves:
        raise DegenerateClass(-1)

    grid = sorted({x for curve in curves for x, _ in curve.points})
    mean_tpr = []
    for x in grid:
        tprs = []
        for curve in curves:
            xs = [p[0] for p in curve.points]
            ys = [p[1] for p in curve.points]
            tprs.append(float(np.interp(x, xs, ys)))
        mean_tpr.append(sum(tprs) / len(tprs))

    points = tuple(zip(grid, mean_tpr))
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    thresholds = tuple(math.nan for _ in points)  # averaged curve has no single cut
    return RocCurve(points=points, thresholds=thresholds, auc=float(auc))


def compute_report(probs: np.ndarray, labels, num_classes: int) -> tuple[dict, dict[str, RocCurve]]:
    """Metrics JSON payload plus the named curves to export alongside it."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = probs.argmax(axis=1)
    conf = confusion(preds, labels, num_classes)

    curves: dict[str, RocCurve] = {}
    per_class_auc: dict[str, float | None] = {}
    for c in range(num_classes):
        try:
            curve = roc_one_vs_rest(probs, labels, c)
            curves[f"roc_class{c}"] = curve
            per_class_auc[str(c)] = curve.auc
        except DegenerateClass:
            per_class_auc[str(c)] = None
    curves["roc_micro"] = micro_average_roc(probs, labels)
    try:
        curves["roc_macro"] = macro_average_roc(probs, labels)
        macro_auc = curves["roc_macro"].auc
    except DegenerateClass:
        macro_auc = None

    report = {
        "num_samples": int(labels.size),
        "accuracy": accuracy(preds, labels),
        "per_class_auc": per_class_auc,
        "micro_auc": curves["roc_micro"].auc,
        "macro_auc": macro_auc,
        "confusion": conf.counts.tolist(),
    }
    return report, curves


def export_metrics(report: dict, curves: dict[str, RocCurve], out_dir: str | Path) -> list[Path]:
    """Write metrics.json and one fpr,tpr,threshold CSV per curve."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    written.append(metrics_path)

    for name in sorted(curves):
        curve = curves[name]
        path = out_dir / f"{name}.csv"
        lines = ["fpr,tpr,threshold"]
        for (fpr, tpr), thr in zip(curve.points, curve.thresholds):
            lines.append(f"{fpr!r},{tpr!r},{thr!r}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written
