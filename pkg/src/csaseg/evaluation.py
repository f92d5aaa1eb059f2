"""Confusion-matrix accumulation and mean IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, UndefinedMetricError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """``C x C`` int64 counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        if num_classes < 1:
            raise DataError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DimensionError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        keep = gt != self.ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        n = self.num_classes
        for name, labels in (("ground truth", g), ("prediction", p)):
            if labels.size and (labels.min() < 0 or labels.max() >= n):
                bad = labels[(labels < 0) | (labels >= n)][0]
                raise DataError(f"{name} label {bad} outside 0..{n - 1}")
        self.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot add confusion matrices of different sizes")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class IoUResult:
    mean: float
    per_class: list[float | None]  # None where the class has an empty union


def miou(cm: ConfusionMatrix) -> IoUResult:
    """Mean IoU over the classes that occur in the ground truth or prediction."""
    diag = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    present = union > 0
    if not present.any():
        raise UndefinedMetricError("no class present in ground truth or prediction")
    iou = np.divide(diag, union, out=np.zeros_like(diag), where=present)
    per_class = [float(v) if ok else None for v, ok in zip(iou, present)]
    return IoUResult(mean=float(iou[present].mean()), per_class=per_class)
