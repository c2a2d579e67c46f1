"""Raw longitudinal scan pairs -> aligned, normalized, fixed-size volumes.

Pipeline order (preprocess_pair): crop each study to its lung bounding box,
clip + min-max normalize intensities, register the reference lung mask to the
target lung mask, warp the reference volume and segmentation, drop empty
slices by the target's axial criterion, and resize everything to the model
grid. Deformable B-spline registration is deliberately a pluggable backend;
the bundled backends are ``identity`` and ``affine`` (center-of-mass plus
per-axis bounding-box scale).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import ndimage

from .core import LabelMask, ShapeMismatchError, Volume, _check_plane

CLIP_RANGE = (-1024.0, 600.0)
EMPTY_SLICE_THRESHOLD = 1e-5  # 0.001% of the unit intensity range
MODEL_GRID = (150, 150, 150)


class PreprocessError(RuntimeError):
    """A preprocessing stage failed; the message names the stage."""


@dataclass
class RawStudy:
    """One raw scan with its lung mask."""

    raw_volume: np.ndarray
    lung_mask: np.ndarray
    timepoint: int = 1
    patient_id: str = ""

    def __post_init__(self):
        self.raw_volume = np.asarray(self.raw_volume)
        self.lung_mask = np.asarray(self.lung_mask) != 0
        if self.raw_volume.ndim != 3:
            raise ValueError(f"raw volume must be 3D, got {self.raw_volume.shape}")
        if self.lung_mask.shape != self.raw_volume.shape:
            raise ShapeMismatchError(
                f"lung mask shape {self.lung_mask.shape} != volume shape "
                f"{self.raw_volume.shape}"
            )
        if not self.lung_mask.any():
            raise ValueError("lung mask is empty")
        if self.timepoint < 1:
            raise ValueError(f"timepoint must be >= 1, got {self.timepoint}")


@dataclass
class DeformationField:
    """Dense displacement from target-grid voxels to reference-grid coordinates.

    ``disp`` has shape (3, h, w, s); the reference coordinate sampled for
    target voxel v is ``v + disp[:, v]``.
    """

    disp: np.ndarray

    def __post_init__(self):
        self.disp = np.asarray(self.disp, dtype=np.float32)
        if self.disp.ndim != 4 or self.disp.shape[0] != 3:
            raise ValueError(f"displacement must be (3, h, w, s), got {self.disp.shape}")
        if not np.all(np.isfinite(self.disp)):
            raise ValueError("displacement field contains non-finite values")

    @classmethod
    def identity(cls, shape) -> "DeformationField":
        return cls(np.zeros((3, *shape), dtype=np.float32))

    @property
    def grid_shape(self):
        return self.disp.shape[1:]


def mask_bbox(mask: np.ndarray):
    """Tight axis-aligned bounding box of a binary mask, as slices."""
    mask = np.asarray(mask) != 0
    if not mask.any():
        raise ValueError("cannot compute the bounding box of an empty mask")
    slices = []
    for axis in range(mask.ndim):
        proj = mask.any(axis=tuple(a for a in range(mask.ndim) if a != axis))
        idx = np.flatnonzero(proj)
        slices.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(slices)


def crop_to_lung(raw: RawStudy) -> np.ndarray:
    """Box crop of the raw volume to its lung mask (voxels outside kept)."""
    return raw.raw_volume[mask_bbox(raw.lung_mask)]


def clip_normalize(grid: np.ndarray, clip_range=CLIP_RANGE) -> Volume:
    """Clip intensities to ``clip_range``, then min-max normalize to [0, 1].

    A constant grid maps to all zeros.
    """
    grid = np.asarray(grid, dtype=np.float32)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    clipped = np.clip(grid, clip_range[0], clip_range[1])
    lo = clipped.min()
    hi = clipped.max()
    if hi == lo:
        return Volume(np.zeros_like(clipped, dtype=np.float32))
    return Volume(((clipped - lo) / (hi - lo)).astype(np.float32))


def drop_empty_slices(
    vol: Union[Volume, np.ndarray],
    plane: str = "axial",
    threshold: float = EMPTY_SLICE_THRESHOLD,
):
    """Remove slices whose intensity variation (max - min) is below threshold.

    Returns the filtered volume and the kept slice indices so paired grids
    can be filtered identically.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    axis = _check_plane(plane)
    other = tuple(a for a in range(3) if a != axis)
    variation = data.max(axis=other) - data.min(axis=other)
    kept = np.flatnonzero(variation >= threshold)
    if kept.size == 0:
        raise ValueError("every slice is empty under the variation criterion")
    filtered = np.take(data, kept, axis=axis)
    if isinstance(vol, Volume):
        return Volume(filtered, spacing=vol.spacing, id=vol.id), kept.tolist()
    return filtered, kept.tolist()


def _resample_coords(src_shape, dst_shape):
    axes = [
        np.linspace(0.0, n - 1.0, t) if n > 1 else np.zeros(t)
        for n, t in zip(src_shape, dst_shape)
    ]
    return np.meshgrid(*axes, indexing="ij")


def resize(vol, target=MODEL_GRID, kind: str = "image"):
    """Resample to an exact target shape.

    Images use trilinear interpolation, masks nearest-neighbor so labels stay
    in their original value set. Accepts Volume, LabelMask or a bare array
    and returns the same kind.
    """
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    if isinstance(vol, Volume):
        return Volume(resize(vol.data, target, kind), spacing=None, id=vol.id)
    if isinstance(vol, LabelMask):
        return LabelMask(resize(vol.labels, target, "mask"), vol.class_count)
    data = np.asarray(vol)
    if data.shape == tuple(target):
        return data.copy()
    coords = _resample_coords(data.shape, target)
    order = 1 if kind == "image" else 0
    out = ndimage.map_coordinates(data, coords, order=order, mode="nearest")
    return out.astype(data.dtype) if kind == "mask" else out.astype(np.float32)


def _affine_backend(ref_mask: np.ndarray, target_mask: np.ndarray) -> DeformationField:
    ref_box = mask_bbox(ref_mask)
    tgt_box = mask_bbox(target_mask)
    scale = np.array(
        [
            (r.stop - r.start) / (t.stop - t.start)
            for r, t in zip(ref_box, tgt_box)
        ],
        dtype=np.float64,
    )
    com_ref = np.array(ndimage.center_of_mass(ref_mask))
    com_tgt = np.array(ndimage.center_of_mass(target_mask))

    shape = target_mask.shape
    disp = np.empty((3, *shape), dtype=np.float32)
    for axis in range(3):
        coord = np.arange(shape[axis], dtype=np.float64)
        mapped = com_ref[axis] + scale[axis] * (coord - com_tgt[axis])
        delta = (mapped - coord).astype(np.float32)
        expand = [1, 1, 1]
        expand[axis] = shape[axis]
        disp[axis] = np.broadcast_to(delta.reshape(expand), shape)
    return DeformationField(disp)


def _identity_backend(ref_mask: np.ndarray, target_mask: np.ndarray) -> DeformationField:
    return DeformationField.identity(target_mask.shape)


REGISTRATION_BACKENDS = {
    "identity": _identity_backend,
    "affine": _affine_backend,
}


def register_reference(
    ref_lung_mask: np.ndarray,
    target_lung_mask: np.ndarray,
    backend: Union[str, Callable] = "affine",
) -> DeformationField:
    """Estimate the deformation aligning the reference onto the target grid.

    Registration runs on lung masks, not intensities. ``backend`` is either a
    bundled backend name or a callable ``(ref_mask, target_mask) -> field``
    (the plug-in point for external deformable algorithms).
    """
    ref_lung_mask = np.asarray(ref_lung_mask) != 0
    target_lung_mask = np.asarray(target_lung_mask) != 0
    if ref_lung_mask.shape != target_lung_mask.shape:
        raise ShapeMismatchError(
            f"mask shapes differ: {ref_lung_mask.shape} vs {target_lung_mask.shape}"
        )
    fn = REGISTRATION_BACKENDS.get(backend) if isinstance(backend, str) else backend
    if fn is None:
        raise ValueError(
            f"unknown registration backend {backend!r}; "
            f"bundled: {sorted(REGISTRATION_BACKENDS)}"
        )
    try:
        field = fn(ref_lung_mask, target_lung_mask)
    except Exception as exc:
        raise PreprocessError(f"registration backend failed: {exc}") from exc
    if field.grid_shape != target_lung_mask.shape:
        raise ShapeMismatchError(
            f"backend returned a field for grid {field.grid_shape}, "
            f"expected {target_lung_mask.shape}"
        )
    return field


def apply_deformation(vol, field: DeformationField, kind: str = "image"):
    """Warp a volume or mask by sampling it at the field's mapped coordinates.

    Trilinear sampling for images, nearest for masks; out-of-bounds samples
    become 0 / background.
    """
    if kind not in ("image", "mask"):
        raise ValueError(f"kind must be 'image' or 'mask', got {kind!r}")
    if isinstance(vol, Volume):
        return Volume(apply_deformation(vol.data, field, kind), spacing=vol.spacing, id=vol.id)
    if isinstance(vol, LabelMask):
        return LabelMask(apply_deformation(vol.labels, field, "mask"), vol.class_count)
    data = np.asarray(vol)
    if data.shape != field.grid_shape:
        raise ShapeMismatchError(
            f"field grid {field.grid_shape} does not cover input {data.shape}"
        )
    base = np.meshgrid(*[np.arange(n, dtype=np.float32) for n in data.shape], indexing="ij")
    coords = [base[a] + field.disp[a] for a in range(3)]
    order = 1 if kind == "image" else 0
    out = ndimage.map_coordinates(data, coords, order=order, mode="constant", cval=0.0)
    return out.astype(data.dtype) if kind == "mask" else out.astype(np.float32)


def preprocess_pair(
    ref: RawStudy,
    target: RawStudy,
    ref_seg: LabelMask,
    backend: Union[str, Callable] = "affine",
    target_shape=MODEL_GRID,
):
    """Full preprocessing of one longitudinal pair.

    Returns the aligned (reference Volume, reference LabelMask, target Volume)
    triple, all of shape ``target_shape``. Any stage failure is re-raised as
    PreprocessError naming the stage.
    """
    if ref_seg.labels.shape != ref.raw_volume.shape:
        raise ShapeMismatchError(
            f"ref_seg shape {ref_seg.labels.shape} != reference volume shape "
            f"{ref.raw_volume.shape}"
        )

    def stage(name, fn):
        try:
            return fn()
        except PreprocessError:
            raise
        except Exception as exc:
            raise PreprocessError(f"{name}: {exc}") from exc

    def _crop():
        rbox = mask_bbox(ref.lung_mask)
        tbox = mask_bbox(target.lung_mask)
        return (
            ref.raw_volume[rbox],
            ref_seg.labels[rbox],
            ref.lung_mask[rbox],
            target.raw_volume[tbox],
            target.lung_mask[tbox],
        )

    ref_vol, ref_lab, ref_lung, tgt_vol, tgt_lung = stage("crop", _crop)

    ref_norm = stage("normalize", lambda: clip_normalize(ref_vol))
    tgt_norm = stage("normalize", lambda: clip_normalize(tgt_vol))

    # Bring the reference crop onto the target crop's grid before registering,
    # since the two lung boxes generally differ in size.
    def _register():
        grid = tgt_vol.shape
        ref_rs = resize(ref_norm.data, grid, "image")
        seg_rs = resize(ref_lab, grid, "mask")
        lung_rs = resize(ref_lung.astype(np.uint8), grid, "mask")
        field = register_reference(lung_rs, tgt_lung, backend)
        return ref_rs, seg_rs, field

    ref_rs, seg_rs, field = stage("register", _register)

    def _warp():
        return (
            apply_deformation(ref_rs, field, "image"),
            apply_deformation(seg_rs, field, "mask"),
        )

    ref_warp, seg_warp = stage("warp", _warp)

    def _drop():
        filtered, kept = drop_empty_slices(tgt_norm.data, "axial")
        return (
            np.take(ref_warp, kept, axis=2),
            np.take(seg_warp, kept, axis=2),
            filtered,
        )

    ref_kept, seg_kept, tgt_kept = stage("drop", _drop)

    def _resize():
        return (
            Volume(resize(ref_kept, target_shape, "image"), id=ref.patient_id),
            LabelMask(resize(seg_kept, target_shape, "mask"), ref_seg.class_count),
            Volume(resize(tgt_kept, target_shape, "image"), id=target.patient_id),
        )

    return stage("resize", _resize)
