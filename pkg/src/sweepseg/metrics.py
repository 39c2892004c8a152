"""Confusion-matrix accumulation and segmentation metrics.

All metrics derive from a K x K count matrix with true classes on rows
and predicted classes on columns. Void pixels never enter the matrix.
Classes absent from the relevant denominator are excluded from class
means rather than scored zero, and their vector entries are NaN.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """counts[t][p] = number of pixels of true class t predicted as p."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be K x K, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ConfigError("confusion matrix counts must be non-negative")

    @classmethod
    def zeros(cls, k: int) -> "ConfusionMatrix":
        if k < 1:
            raise ConfigError(f"class count must be >= 1, got {k}")
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.k != other.k:
            raise DimensionError(f"cannot add {self.k}-class and {other.k}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, target, void_class: int | None = None) -> ConfusionMatrix:
    """Count every non-void pixel into a new matrix; void pixels are skipped."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred extents {pred.shape} vs target {target.shape}")
    k = cm.k
    keep = np.ones(target.shape, dtype=bool) if void_class is None \
        else target != void_class
    p = pred[keep].ravel()
    t = target[keep].ravel()
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ConfigError(f"prediction indices outside [0, {k})")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ConfigError(f"target indices outside [0, {k}) after void removal")
    delta = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + delta)


def global_accuracy(cm: ConfusionMatrix) -> float:
    """Correct pixels over all evaluated pixels."""
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("no evaluated pixels")
    return float(np.trace(cm.counts)) / total


def per_class_accuracy(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class recall and its mean over classes present in the ground truth.

    Classes with an empty row get NaN and are excluded from the mean.
    """
    row = cm.counts.sum(axis=1)
    present = row > 0
    if not present.any():
        raise UndefinedMetricError("no class occurs in the ground truth")
    acc = np.full(cm.k, np.nan)
    acc[present] = np.diag(cm.counts)[present] / row[present]
    return acc, float(acc[present].mean())


def mean_iou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class intersection over union, TP / (TP + FP + FN), and its mean.

    Classes with a zero denominator (absent from both prediction and
    ground truth) get NaN and are excluded from the mean.
    """
    tp = np.diag(cm.counts)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    defined = denom > 0
    if not defined.any():
        raise UndefinedMetricError("IoU is undefined for every class")
    iou = np.full(cm.k, np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou, float(iou[defined].mean())


def _fmt_pct(x: float) -> str:
    return "n/a" if np.isnan(x) else f"{100.0 * x:.1f}"


def render_table(cm: ConfusionMatrix, class_names: list[str]) -> str:
    """Human-readable report: per-class rows plus the three summary metrics."""
    if len(class_names) != cm.k:
        raise DimensionError(f"{len(class_names)} names for {cm.k} classes")
    acc, avg_acc = per_class_accuracy(cm)
    iou, avg_iou = mean_iou(cm)
    width = max(len(n) for n in class_names + ["class"])
    lines = [f"{'class':<{width}}  {'acc%':>6}  {'iou%':>6}  {'pixels':>9}"]
    row_tot = cm.counts.sum(axis=1)
    for i, name in enumerate(class_names):
        lines.append(f"{name:<{width}}  {_fmt_pct(acc[i]):>6}  {_fmt_pct(iou[i]):>6}  "
                     f"{row_tot[i]:>9}")
    lines.append("")
    lines.append(f"global acc     {_fmt_pct(global_accuracy(cm)):>6}")
    lines.append(f"avg class acc  {_fmt_pct(avg_acc):>6}")
    lines.append(f"avg iou        {_fmt_pct(avg_iou):>6}")
    lines.append(f"evaluated pixels: {cm.total}")
    return "\n".join(lines)


def report_csv(cm: ConfusionMatrix, class_names: list[str]) -> str:
    """The same report as machine-readable CSV (fractions, not percents)."""
    import csv

    acc, avg_acc = per_class_accuracy(cm)
    iou, avg_iou = mean_iou(cm)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["class", "accuracy", "iou", "pixels"])
    row_tot = cm.counts.sum(axis=1)
    for i, name in enumerate(class_names):
        writer.writerow([
            name,
            "" if np.isnan(acc[i]) else f"{acc[i]:.6f}",
            "" if np.isnan(iou[i]) else f"{iou[i]:.6f}",
            int(row_tot[i])])
    writer.writerow(["__global_acc__", f"{global_accuracy(cm):.6f}", "", cm.total])
    writer.writerow(["__avg_class_acc__", f"{avg_acc:.6f}", "", ""])
    writer.writerow(["__avg_iou__", "", f"{avg_iou:.6f}", ""])
    return buf.getvalue()
