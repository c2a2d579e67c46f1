"""Core domain types and tensor assembly for longitudinal interactive segmentation.

Axis convention used across the whole package: volumes are numpy arrays of
shape (h, w, s). A plane selects the axis that is held fixed when slicing:

    axial    -> axis 2 (slices of shape h x w)
    coronal  -> axis 0 (slices of shape w x s)
    sagittal -> axis 1 (slices of shape h x s)

Label values: 0 background, 1 GGO, 2 CONS. Edit masks carry one channel per
foreground class with +1 marking a foreground correction, -1 a background
correction and 0 no interaction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NUM_FG_CLASSES = 2
NUM_CLASSES = NUM_FG_CLASSES + 1  # background + GGO + CONS
NUM_INPUT_CHANNELS = 8

PLANES = ("axial", "coronal", "sagittal")
PLANE_AXIS = {"axial": 2, "coronal": 0, "sagittal": 1}

PROB_SUM_TOL = 1e-5


class ShapeMismatchError(ValueError):
    """Raised when grids that must share a shape do not."""


def _check_plane(plane: str) -> int:
    if plane not in PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}, expected one of {PLANES}")
    return PLANE_AXIS[plane]


@dataclass
class Volume:
    """3D scalar grid of normalized intensities in [0, 1]."""

    data: np.ndarray
    spacing: Optional[tuple] = None
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume has an empty axis: {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelMask:
    """Integer class labels in {0..C}; 3D volume or 2D slice."""

    labels: np.ndarray
    class_count: int = NUM_FG_CLASSES

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim not in (2, 3):
            raise ValueError(f"labels must be 2D or 3D, got shape {self.labels.shape}")
        bad = (self.labels < 0) | (self.labels > self.class_count)
        if bad.any():
            raise ValueError(
                f"labels contain values outside 0..{self.class_count}: "
                f"{np.unique(self.labels[bad])}"
            )

    @property
    def shape(self):
        return self.labels.shape

    def binary(self, cls: int) -> np.ndarray:
        """Binary mask of one foreground class."""
        if not 1 <= cls <= self.class_count:
            raise ValueError(f"cls must be in 1..{self.class_count}, got {cls}")
        return (self.labels == cls).astype(np.float32)

    def per_class(self) -> np.ndarray:
        """Stack of per-class binary masks, shape (C, ...)."""
        return np.stack([self.binary(c) for c in range(1, self.class_count + 1)])


@dataclass
class ProbMap:
    """Per-voxel class probabilities, shape (C+1, ...), summing to 1."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim not in (3, 4):
            raise ValueError(f"probs must be (classes, h, w[, s]), got {self.probs.shape}")
        if self.probs.min() < -PROB_SUM_TOL or self.probs.max() > 1 + PROB_SUM_TOL:
            raise ValueError("probabilities outside [0, 1]")
        sums = self.probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise ValueError(
                f"probabilities do not sum to 1 (max deviation {np.abs(sums - 1.0).max():.2e})"
            )

    @property
    def class_count(self) -> int:
        return self.probs.shape[0] - 1

    @property
    def max_prob(self) -> np.ndarray:
        return self.probs.max(axis=0)


@dataclass
class EditMask:
    """Per-class user corrections, shape (C, ...), values in {-1, 0, +1}."""

    edits: np.ndarray

    def __post_init__(self):
        self.edits = np.asarray(self.edits)
        if self.edits.ndim not in (3, 4):
            raise ValueError(f"edits must be (classes, h, w[, s]), got {self.edits.shape}")
        if not np.isin(self.edits, (-1, 0, 1)).all():
            raise ValueError("edit values must be in {-1, 0, +1}")

    @classmethod
    def zeros(cls, spatial_shape, class_count: int = NUM_FG_CLASSES) -> "EditMask":
        return cls(np.zeros((class_count, *spatial_shape), dtype=np.int8))

    @property
    def shape(self):
        return self.edits.shape


@dataclass
class InputStack:
    """The 8-channel per-slice model input, shape (8, h, w).

    Channel order (fixed):
      0: reference slice X_t
      1: reference segmentation S_t, GGO binary
      2: reference segmentation S_t, CONS binary
      3: target slice X_{t+1}
      4: previous-round highest class probability per pixel
      5: previous-round predicted labels encoded as value / C, i.e. {0, 0.5, 1}
      6: edit mask, GGO channel
      7: edit mask, CONS channel

    Channels 0-5 lie in [0, 1]; channels 6-7 take values in {-1, 0, +1}.
    In the first segmentation round channels 4-7 are all zero.
    """

    channels: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[0] != NUM_INPUT_CHANNELS:
            raise ValueError(
                f"input stack must have shape (8, h, w), got {self.channels.shape}"
            )


@dataclass
class RefinementRound:
    """One prediction round within a refinement session."""

    index: int
    prob: ProbMap
    labels: LabelMask
    edits_submitted: EditMask
    edits_accumulated: EditMask

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"round index must be >= 1, got {self.index}")


def _require_shape(name: str, arr: np.ndarray, expected: tuple) -> None:
    if tuple(arr.shape) != tuple(expected):
        raise ShapeMismatchError(
            f"{name} has shape {tuple(arr.shape)}, expected {tuple(expected)}"
        )


def assemble_input(
    ref_slice: np.ndarray,
    ref_seg: LabelMask,
    target_slice: np.ndarray,
    prev_prob: Optional[ProbMap] = None,
    prev_labels: Optional[LabelMask] = None,
    edits: Optional[EditMask] = None,
) -> InputStack:
    """Build the 8-channel model input for one target slice.

    Absent optional inputs (first round) are replaced by zero channels.
    All spatial shapes must match ``ref_slice``; a mismatch raises
    :class:`ShapeMismatchError` naming the offending input.
    """
    ref_slice = np.asarray(ref_slice, dtype=np.float32)
    if ref_slice.ndim != 2:
        raise ValueError(f"ref_slice must be 2D, got shape {ref_slice.shape}")
    hw = ref_slice.shape
    c = ref_seg.class_count

    _require_shape("ref_seg", ref_seg.labels, hw)
    target_slice = np.asarray(target_slice, dtype=np.float32)
    _require_shape("target_slice", target_slice, hw)

    stack = np.zeros((NUM_INPUT_CHANNELS, *hw), dtype=np.float32)
    stack[0] = ref_slice
    stack[1:3] = ref_seg.per_class()
    stack[3] = target_slice
    if prev_prob is not None:
        _require_shape("prev_prob", prev_prob.probs, (c + 1, *hw))
        stack[4] = prev_prob.max_prob
    if prev_labels is not None:
        _require_shape("prev_labels", prev_labels.labels, hw)
        stack[5] = prev_labels.labels.astype(np.float32) / c
    if edits is not None:
        _require_shape("edits", edits.edits, (c, *hw))
        stack[6:8] = edits.edits
    return InputStack(stack)


def accumulate_edits(previous: EditMask, current: EditMask) -> EditMask:
    """Merge the current round's edits into the running edit state.

    The current edits take priority: the result is
    ``clip(2 * current + previous, -1, +1)``, so a fresh nonzero edit always
    wins while untouched voxels keep their previous value.
    """
    if previous.shape != current.shape:
        raise ShapeMismatchError(
            f"edit masks differ in shape: {previous.shape} vs {current.shape}"
        )
    merged = np.clip(
        2 * current.edits.astype(np.int8) + previous.edits.astype(np.int8), -1, 1
    )
    return EditMask(merged.astype(np.int8))


def extract_slices(volume: np.ndarray, plane: str) -> list:
    """Ordered 2D slices of a volume along the given plane's normal axis."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {volume.shape}")
    if volume.size == 0:
        raise ValueError("volume is empty")
    axis = _check_plane(plane)
    moved = np.moveaxis(volume, axis, 0)
    return [moved[i] for i in range(moved.shape[0])]


def restack(slices: Sequence[np.ndarray], plane: str) -> np.ndarray:
    """Inverse of :func:`extract_slices`."""
    axis = _check_plane(plane)
    return np.moveaxis(np.stack(list(slices), axis=0), 0, axis)


def labels_from_probs(prob: ProbMap):
    """Per-voxel argmax labels and max probability; ties go to the lowest class."""
    labels = np.argmax(prob.probs, axis=0).astype(np.uint8)
    return prob.max_prob, LabelMask(labels, class_count=prob.class_count)


def fuse_views(
    prob_axial: ProbMap, prob_coronal: ProbMap, prob_sagittal: ProbMap
):
    """Fuse three per-view probability volumes into one voxelwise prediction.

    The fused probability is the arithmetic mean of the three views' class
    probabilities; labels are the argmax of the fused map (ties to the lowest
    class index). The operation is invariant to the order of its arguments.
    """
    shapes = {p.probs.shape for p in (prob_axial, prob_coronal, prob_sagittal)}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"view probability shapes differ: {sorted(shapes)}")
    stacked = np.stack([prob_axial.probs, prob_coronal.probs, prob_sagittal.probs])
    # sort per voxel so the summation order (and hence the float rounding)
    # does not depend on argument order
    stacked = np.sort(stacked, axis=0)
    fused = ProbMap((stacked[0] + stacked[1] + stacked[2]) / 3.0)
    max_prob, labels = labels_from_probs(fused)
    return fused, labels
