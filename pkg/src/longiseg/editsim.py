"""Simulated user scribbles on wrongly segmented regions.

A prediction is compared against the ground truth per slice; connected
under-/over-segmented regions (8-connectivity) are ranked by area and the
largest ones receive a simulated stroke: a one-voxel-thick digital line
through the region's two most distant boundary voxels, clipped to the region.
Under-segmentation produces +1 edits on the class channel, over-segmentation
-1. All tie-breaking is deterministic so training runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import EditMask, LabelMask, ShapeMismatchError

EIGHT_CONN = np.ones((3, 3), dtype=bool)

DEFAULT_TOPK = 5
DEFAULT_EDIT_CAP = 20  # scribbles per simulate_edits call


@dataclass
class ErrorRegion:
    """One connected wrongly-segmented region on a 2D slice."""

    cls: int
    polarity: str  # "under" (false negative) or "over" (false positive)
    voxels: np.ndarray  # (n, 2) int coordinates, lexicographically sorted
    area: int
    slice_ref: Optional[tuple] = None  # (plane, index) when known

    def __post_init__(self):
        if self.polarity not in ("under", "over"):
            raise ValueError(f"polarity must be 'under' or 'over', got {self.polarity!r}")
        if self.area != len(self.voxels) or self.area == 0:
            raise ValueError("region area must equal its non-zero voxel count")


def error_regions(pred: LabelMask, gt: LabelMask, slice_ref=None) -> list:
    """Connected components of per-class disagreement between pred and gt."""
    p = pred.labels
    g = gt.labels
    if p.shape != g.shape:
        raise ShapeMismatchError(f"pred shape {p.shape} != gt shape {g.shape}")
    if p.ndim != 2:
        raise ValueError(f"expected 2D slices, got shape {p.shape}")

    regions = []
    for cls in range(1, gt.class_count + 1):
        for polarity, mask in (
            ("under", (g == cls) & (p != cls)),
            ("over", (p == cls) & (g != cls)),
        ):
            labeled, n = ndimage.label(mask, structure=EIGHT_CONN)
            for i in range(1, n + 1):
                voxels = np.argwhere(labeled == i)  # row-major, i.e. lexicographic
                regions.append(
                    ErrorRegion(
                        cls=cls,
                        polarity=polarity,
                        voxels=voxels,
                        area=len(voxels),
                        slice_ref=slice_ref,
                    )
                )
    return regions


def _region_sort_key(region: ErrorRegion):
    return (
        -region.area,
        region.cls,
        0 if region.polarity == "under" else 1,
        tuple(region.voxels[0]),
    )


def select_topk(regions: list, k: int = DEFAULT_TOPK) -> list:
    """The k largest regions by area, deterministic under ties."""
    return sorted(regions, key=_region_sort_key)[:k]


def digital_line(p0, p1) -> np.ndarray:
    """Integer Bresenham line between two pixels, endpoints included."""
    r0, c0 = int(p0[0]), int(p0[1])
    r1, c1 = int(p1[0]), int(p1[1])
    dr = abs(r1 - r0)
    dc = abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dr - dc
    points = []
    r, c = r0, c0
    while True:
        points.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dc:
            err -= dc
            r += sr
        if e2 < dr:
            err += dr
            c += sc
    return np.asarray(points, dtype=np.int64)


def _boundary(voxels: np.ndarray) -> np.ndarray:
    """Region voxels with at least one 4-neighbor outside the region."""
    vset = {tuple(v) for v in voxels}
    out = [
        v
        for v in voxels
        if any(
            (v[0] + dr, v[1] + dc) not in vset
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
        )
    ]
    return np.asarray(out, dtype=np.int64)


def synthesize_scribble(region: ErrorRegion) -> np.ndarray:
    """A 1-voxel-thick stroke through the region's long axis.

    The stroke is the digital line between the two boundary voxels at maximal
    pairwise distance, restricted to voxels inside the region. For a single
    voxel the stroke is that voxel.
    """
    if region.area == 1:
        return region.voxels.copy()
    boundary = _boundary(region.voxels)
    diffs = boundary[:, None, :] - boundary[None, :, :]
    d2 = (diffs**2).sum(axis=2)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    line = digital_line(boundary[i], boundary[j])
    vset = {tuple(v) for v in region.voxels}
    inside = np.asarray([p for p in line if tuple(p) in vset], dtype=np.int64)
    return inside


def write_scribble(edits: np.ndarray, region: ErrorRegion, scribble: np.ndarray) -> None:
    """Stamp one region's scribble into a (C, h, w) edit array in place."""
    value = 1 if region.polarity == "under" else -1
    edits[region.cls - 1, scribble[:, 0], scribble[:, 1]] = value


def ranked_regions(pairs, k: int = DEFAULT_TOPK) -> list:
    """Rank error regions from many slices under one shared edit budget.

    ``pairs`` yields (tag, pred LabelMask, gt LabelMask) with a sortable tag
    per slice. Each slice contributes at most its top-``k`` regions; the
    combined list is ordered by descending area with deterministic
    tie-breaking, so callers can draw the first ``cap`` entries.
    """
    candidates = []
    for tag, pred, gt in pairs:
        for region in select_topk(error_regions(pred, gt), k):
            candidates.append((tag, region))
    candidates.sort(
        key=lambda item: (
            -item[1].area,
            item[0],
            item[1].cls,
            0 if item[1].polarity == "under" else 1,
            tuple(item[1].voxels[0]),
        )
    )
    return candidates


def simulate_edits(
    pred: LabelMask, gt: LabelMask, cap: int = DEFAULT_EDIT_CAP, k: int = DEFAULT_TOPK
) -> EditMask:
    """Simulated user feedback for one slice as an EditMask.

    The top-``k`` largest error regions are selected across classes and
    polarities; scribbles are written in descending area order until ``cap``
    scribbles have been drawn. Overlapping scribbles resolve last-writer-wins
    in that (deterministic) order.
    """
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    regions = select_topk(error_regions(pred, gt), k)
    edits = np.zeros((gt.class_count, *gt.labels.shape), dtype=np.int8)
    for region in regions[:cap]:
        write_scribble(edits, region, synthesize_scribble(region))
    return EditMask(edits)
