"""Segmentation quality metrics: Dice, precision, recall, volume difference.

All metrics treat one foreground class against the rest. The empty-vs-empty
convention is 1.0 for DSC/PPV/TPR (a perfect prediction of an absent class
scores perfectly) and 0.0 for VD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMask, ShapeMismatchError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")


def confusion(pred: LabelMask, gt: LabelMask, cls: int) -> ConfusionCounts:
    """Voxelwise TP/FP/FN counts for one class, class-vs-rest."""
    p = pred.labels
    g = gt.labels
    if p.shape != g.shape:
        raise ShapeMismatchError(f"pred shape {p.shape} != gt shape {g.shape}")
    if not 1 <= cls <= gt.class_count:
        raise ValueError(f"cls must be in 1..{gt.class_count}, got {cls}")
    pm = p == cls
    gm = g == cls
    tp = int(np.count_nonzero(pm & gm))
    fp = int(np.count_nonzero(pm & ~gm))
    fn = int(np.count_nonzero(~pm & gm))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn)


def dsc(c: ConfusionCounts) -> float:
    """Dice similarity coefficient, 2TP / (2TP + FP + FN)."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def ppv(c: ConfusionCounts) -> float:
    """Positive predictive value (precision), TP / (TP + FP)."""
    denom = c.tp + c.fp
    if denom == 0:
        return 1.0
    return c.tp / denom


def tpr(c: ConfusionCounts) -> float:
    """True positive rate (recall), TP / (TP + FN)."""
    denom = c.tp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def vd(pred_volume_count: int, gt_volume_count: int) -> float:
    """Volume difference in percent, 100 * |pred - gt| / gt."""
    if gt_volume_count < 0 or pred_volume_count < 0:
        raise ValueError("volume counts must be non-negative")
    if gt_volume_count == 0:
        if pred_volume_count == 0:
            return 0.0
        raise ValueError("VD is undefined for an empty ground-truth volume")
    return 100.0 * abs(pred_volume_count - gt_volume_count) / gt_volume_count


def evaluate_mask(pred: LabelMask, gt: LabelMask, cls: int) -> dict:
    """All four metrics of one class as a dict (VD omitted when undefined)."""
    c = confusion(pred, gt, cls)
    out = {"dsc": dsc(c), "ppv": ppv(c), "tpr": tpr(c)}
    gt_count = c.tp + c.fn
    pred_count = c.tp + c.fp
    if gt_count > 0 or pred_count == 0:
        out["vd"] = vd(pred_count, gt_count)
    else:
        out["vd"] = float("nan")
    return out
