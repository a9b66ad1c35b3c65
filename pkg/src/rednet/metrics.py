"""Confusion-matrix accumulation and the three segmentation metrics:
pixel accuracy, mean per-class accuracy, and mean IoU.

Ground truth rows, prediction columns, both 1-based class ids; pixels with
ground-truth label 0 are never scored.  Classes absent from both truth and
prediction are excluded from the means rather than scored as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

IGNORE_INDEX = 0


def predict_labels(scores: Tensor) -> np.ndarray:
    """Argmax over the class axis, lowest class index on ties, ids 1-based."""
    return (scores.data.argmax(axis=1) + 1).astype(np.int32)


class ConfusionMatrix:
    """Integer count matrix cm[gt-1][pred-1], accumulated over batches."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError(f"need at least one class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        k = self.num_classes
        if pred.size and (pred.min() < 1 or pred.max() > k):
            raise ShapeError(f"prediction outside [1, {k}]")
        if gt.size and (gt.min() < 0 or gt.max() > k):
            raise ShapeError(f"ground truth outside [0, {k}]")
        mask = gt != IGNORE_INDEX
        joint = (gt[mask].astype(np.int64) - 1) * k + (pred[mask].astype(np.int64) - 1)
        self.counts += np.bincount(joint, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("class counts differ")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class SegmentationMetrics:
    pixel_acc: float
    mean_acc: float
    miou: float
    class_acc: np.ndarray   # nan where the class has no ground-truth pixels
    class_iou: np.ndarray   # nan where the class appears in neither pred nor gt


def metrics(cm: ConfusionMatrix) -> SegmentationMetrics:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)

    class_acc = np.full(cm.num_classes, np.nan)
    seen = rows > 0
    class_acc[seen] = diag[seen] / rows[seen]

    union = rows + cols - diag
    class_iou = np.full(cm.num_classes, np.nan)
    touched = (rows + cols) > 0
    class_iou[touched] = diag[touched] / union[touched]

    return SegmentationMetrics(
        pixel_acc=float(diag.sum() / total),
        mean_acc=float(class_acc[seen].mean()),
        miou=float(class_iou[touched].mean()),
        class_acc=class_acc,
        class_iou=class_iou,
    )


def report(cm: ConfusionMatrix, title: str = "segmentation metrics") -> str:
    """Plain-text per-class table plus the three summary lines."""
    m = metrics(cm)
    lines = [title, f"{'class':>8} {'acc':>10} {'iou':>10} {'pixels':>12}"]
    rows = cm.counts.sum(axis=1)
    for c in range(cm.num_classes):
        acc = "-" if np.isnan(m.class_acc[c]) else f"{m.class_acc[c]:.4f}"
        iou = "-" if np.isnan(m.class_iou[c]) else f"{m.class_iou[c]:.4f}"
        lines.append(f"{c + 1:>8} {acc:>10} {iou:>10} {int(rows[c]):>12}")
    lines.append(f"pixel accuracy: {m.pixel_acc:.4f}")
    lines.append(f"mean accuracy:  {m.mean_acc:.4f}")
    lines.append(f"mean IoU:       {m.miou:.4f}")
    return "\n".join(lines)
