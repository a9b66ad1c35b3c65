"""Pyramid supervision: median-frequency class weighting, nearest-neighbor
target pyramids, and the five-term cross-entropy total.

Label value 0 means unlabeled and is excluded from weights, losses, and
metrics.  Each of the five terms is a mean over its own scorable pixels, so
summing them unweighted gives low-resolution pixels proportionally more
influence: one 1/16-scale pixel carries (16*16)x the weight of a
full-resolution pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import DataError, ShapeError
from .model import PyramidOutputs
from .tensor import Tensor

IGNORE_INDEX = 0


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss multipliers for class ids 1..N_c.

    ``alpha[c-1]`` weighs class c; absent classes carry weight 0 and are
    flagged in ``present``.
    """

    alpha: np.ndarray
    present: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[0]

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes), np.ones(num_classes, dtype=bool))


def median_frequency_weights(class_pixel_counts) -> ClassWeights:
    """alpha_c = median(prob) / prob(c) over classes that actually occur."""
    counts = np.asarray(class_pixel_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1:
        raise ShapeError(f"expected a 1-d count vector, got shape {counts.shape}")
    if np.any(counts < 0):
        raise ValueError("negative class count")
    total = counts.sum()
    if total == 0:
        raise ValueError("all class counts are zero")
    prob = counts / total
    present = counts > 0
    median = np.median(prob[present])
    alpha = np.zeros_like(prob)
    alpha[present] = median / prob[present]
    return ClassWeights(alpha, present)


def count_label_pixels(label_maps, num_classes: int) -> np.ndarray:
    """Histogram class ids 1..N_c over an iterable of integer label maps."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_maps:
        flat = np.asarray(labels).reshape(-1)
        if flat.size and (flat.min() < 0 or flat.max() > num_classes):
            raise DataError(
                f"label outside [0, {num_classes}]: {flat[(flat < 0) | (flat > num_classes)][0]}"
            )
        counts += np.bincount(flat, minlength=num_classes + 1)[1:]
    return counts


def save_class_counts(path, counts) -> None:
    """Histogram cache: one ``class_id count`` line per class, ids 1-based."""
    counts = np.asarray(counts)
    with open(path, "w") as fh:
        for i, c in enumerate(counts, start=1):
            fh.write(f"{i} {int(c)}\n")


def load_class_counts(path) -> np.ndarray:
    counts = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                cid, cnt = line.split()
                counts[int(cid)] = int(cnt)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad histogram line {line!r}") from exc
    if not counts or sorted(counts) != list(range(1, len(counts) + 1)):
        raise DataError(f"{path}: class ids must be contiguous from 1")
    return np.array([counts[i] for i in range(1, len(counts) + 1)], dtype=np.int64)


@dataclass
class PyramidTargets:
    """Label maps matched to the five output resolutions."""

    out1: np.ndarray
    out2: np.ndarray
    out3: np.ndarray
    out4: np.ndarray
    final: np.ndarray

    def as_tuple(self):
        return (self.out1, self.out2, self.out3, self.out4, self.final)


def build_pyramid_targets(labels: np.ndarray,
                          expected_hw: tuple[int, int] | None = None) -> PyramidTargets:
    """Nearest-neighbor downsample the full map to 1/2, 1/4, 1/8, 1/16.

    The ignore label propagates like any other value.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"labels must be (batch, H, W), got shape {labels.shape}")
    h, w = labels.shape[1:]
    if expected_hw is not None and (h, w) != tuple(expected_hw):
        raise ShapeError(f"label size {(h, w)} does not match expected {tuple(expected_hw)}")
    if h % 16 or w % 16:
        raise ShapeError(f"label size {(h, w)} must divide by 16")
    down = [ops.resize_nearest_array(labels, h // f, w // f) for f in (16, 8, 4, 2)]
    return PyramidTargets(down[0], down[1], down[2], down[3], labels)


def pyramid_loss(outputs: PyramidOutputs, targets: PyramidTargets,
                 weights: ClassWeights, side_weight: float = 1.0,
                 ignore_index: int = IGNORE_INDEX):
    """Summed weighted cross entropy over the five outputs.

    Returns (total, per-output losses, per-output score gradients).  The
    per-output values are the raw unscaled terms; ``side_weight`` scales the
    four side terms in the total and the gradients (0 disables pyramid
    supervision).  Summation order is fixed: out1 + out2 + out3 + out4 + final.
    """
    terms = []
    grads = []
    for out, tgt in zip(outputs.as_tuple(), targets.as_tuple()):
        if (out.shape.n, out.shape.h, out.shape.w) != tgt.shape:
            raise ShapeError(
                f"output {tuple(out.shape)} does not match target {tgt.shape}"
            )
        loss, grad = ops.weighted_softmax_cross_entropy(out, tgt, weights.alpha,
                                                        ignore_index)
        terms.append(loss)
        grads.append(grad)
    total = (side_weight * terms[0] + side_weight * terms[1]
             + side_weight * terms[2] + side_weight * terms[3] + terms[4])
    scaled = [Tensor(g.data * np.asarray(side_weight, dtype=g.dtype)) for g in grads[:4]]
    return total, tuple(terms), PyramidOutputs(*scaled, grads[4])
