"""Binary copper/impurity heatmaps and the metrics computed on them.

A heatmap is a 2D ``uint8`` array where 0 marks copper and 1 marks impurity.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .validation import check_heatmap

COPPER = 0
IMPURITY = 1


@dataclass(frozen=True)
class SegMetrics:
    iou_copper: float
    iou_impurity: float
    miou: float
    confusion: np.ndarray  # rows = truth, cols = prediction

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "SegMetrics":
        """Build metrics from a 2x2 count matrix (truth x prediction).

        A class absent from both prediction and truth scores IoU 1.
        """
        confusion = np.asarray(confusion, dtype=np.int64)
        ious = []
        for c in (COPPER, IMPURITY):
            tp = confusion[c, c]
            union = confusion[c, :].sum() + confusion[:, c].sum() - tp
            ious.append(1.0 if union == 0 else float(tp) / float(union))
        return cls(ious[0], ious[1], (ious[0] + ious[1]) / 2.0, confusion)

    def to_dict(self) -> dict:
        return {
            "iou_copper": self.iou_copper,
            "iou_impurity": self.iou_impurity,
            "miou": self.miou,
            "confusion": self.confusion.tolist(),
        }


def area_purity(h) -> float:
    """Fraction of copper (0) pixels in a heatmap."""
    h = check_heatmap(h)
    return float(np.count_nonzero(h == COPPER)) / h.size


def impurity_fraction(h) -> float:
    h = check_heatmap(h)
    return float(np.count_nonzero(h == IMPURITY)) / h.size


def confusion_matrix(pred, truth) -> np.ndarray:
    pred = check_heatmap(pred)
    truth = check_heatmap(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    idx = truth.astype(np.int64).ravel() * 2 + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=4).reshape(2, 2)


def miou(pred, truth) -> SegMetrics:
    """Per-class IoU and their mean for a single pair of heatmaps."""
    return SegMetrics.from_confusion(confusion_matrix(pred, truth))


def dataset_miou(preds: Sequence, truths: Sequence) -> SegMetrics:
    """Corpus-level mIoU: confusion counts are summed before the ratio."""
    if len(preds) != len(truths):
        raise ValueError("preds and truths differ in length")
    total = np.zeros((2, 2), dtype=np.int64)
    for p, t in zip(preds, truths):
        total += confusion_matrix(p, t)
    return SegMetrics.from_confusion(total)


def stack_heatmaps(hs: Sequence) -> np.ndarray:
    """Splice ``n`` heatmaps into an ``(n, H, W)`` array, preserving order."""
    if len(hs) == 0:
        raise ValueError("cannot stack an empty collection of heatmaps")
    maps = [check_heatmap(h) for h in hs]
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ValueError(f"heatmap {i} has shape {m.shape}, expected {shape}")
    return np.stack(maps, axis=0)


def save_heatmap_png(h, path: str | Path) -> None:
    h = check_heatmap(h)
    Image.fromarray((h * 255).astype(np.uint8), mode="L").save(path)


def load_heatmap_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    values = np.unique(arr)
    if not set(values.tolist()) <= {0, 255}:
        raise ValueError(f"{path}: mask values must be 0 or 255, got {values[:8]}")
    return (arr == 255).astype(np.uint8)
