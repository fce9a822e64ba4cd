# Licensed under the MIT license. See LICENSE.md file in the project root for full license information.

"""Confusion-matrix accumulation, per-class IoU and mIoU, and the CSV report."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from lifseg.errors import EmptyMatrix, LabelOutOfRange, ShapeMismatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """C x C counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeMismatch("ConfusionMatrix", counts.shape, ("C", "C"))
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, class_count: int) -> ConfusionMatrix:
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    @property
    def class_count(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.counts.shape != self.counts.shape:
            raise ShapeMismatch("ConfusionMatrix.merge", self.counts.shape, other.counts.shape)
        return ConfusionMatrix(self.counts + other.counts)


@dataclass(frozen=True, eq=False)
class IoUResult:
    """Per-class IoU (NaN where the denominator is zero) and their mean."""

    per_class: np.ndarray
    mean: float


def accumulate(cm: ConfusionMatrix, predictions, labels) -> ConfusionMatrix:
    """
    counts[label][prediction] += 1 for every point.

    Raises:
        LabelOutOfRange: if a prediction or label is outside [0, C).
    """
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise ShapeMismatch("accumulate", predictions.shape, labels.shape)
    c = cm.class_count
    for name, values in (("label", labels), ("prediction", predictions)):
        if values.size and (values.min() < 0 or values.max() >= c):
            raise LabelOutOfRange(f"{name} outside [0, {c}): {values[(values < 0) | (values >= c)][:5].tolist()}")
    batch = np.bincount(labels * c + predictions, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + batch)


def miou(cm: ConfusionMatrix, strict: bool = False) -> IoUResult:
    """
    IoU_i = p_ii / (p_ii + sum_{j != i} p_ij + sum_{k != i} p_ki).

    Classes with a zero denominator get NaN and are left out of the mean,
    unless strict is set, in which case they count as 0 and the mean divides by C.

    Raises:
        EmptyMatrix: if the matrix holds no points.
    """
    if cm.total == 0:
        raise EmptyMatrix("cannot compute mIoU of an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denominator = counts.sum(axis=1) + counts.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(denominator > 0, tp / denominator, np.nan)
    if strict:
        mean = float(np.nan_to_num(per_class, nan=0.0).sum() / cm.class_count)
    else:
        mean = float(np.nanmean(per_class))
    return IoUResult(per_class=per_class, mean=mean)


def write_report_csv(path, result: IoUResult, class_names: Optional[Sequence[str]] = None):
    """Header class_id,name,iou; one row per class; final row miou,<value>."""
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(len(result.per_class))]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class_id", "name", "iou"])
        for i, iou in enumerate(result.per_class):
            writer.writerow([i, names[i], "nan" if np.isnan(iou) else repr(float(iou))])
        writer.writerow(["miou", repr(result.mean)])
    logger.info(f"Wrote evaluation report to {path}")
