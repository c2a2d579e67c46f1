"""Volume I/O: NIfTI-1 (.nii / .nii.gz) and a raw float stream with JSON sidecar.

Raw format: little-endian voxel stream of the (h, w, s) array in C order,
next to a sidecar ``<path>.json`` with ``{"shape": [h, w, s],
"spacing": [...] | null, "dtype": "float32" | "uint8" | ...}``. Images are
written as float32, masks keep their integer dtype.

The NIfTI codec is intentionally small: single-file NIfTI-1, the common
datatypes, scl_slope/scl_inter honored on read, identity sform scaled by the
voxel spacing on write.
"""

from __future__ import annotations

import gzip
import json
import struct
from pathlib import Path

import numpy as np

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _is_nifti(path) -> bool:
    name = str(path)
    return name.endswith(".nii") or name.endswith(".nii.gz")


def _opener(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def save_nifti(path, arr: np.ndarray, spacing=None) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {arr.shape}")
    dt = np.dtype(arr.dtype)
    if dt not in _NIFTI_CODES:
        # fall back to the closest supported type
        dt = np.dtype(np.float32) if arr.dtype.kind == "f" else np.dtype(np.int32)
        arr = arr.astype(dt)
    sp = tuple(float(s) for s in spacing) if spacing is not None else (1.0, 1.0, 1.0)

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, arr.shape[0], arr.shape[1], arr.shape[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[dt])
    struct.pack_into("<h", hdr, 72, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<h", hdr, 254, 1)  # sform_code
    struct.pack_into("<4f", hdr, 280, sp[0], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, sp[1], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, sp[2], 0)
    hdr[344:348] = b"n+1\x00"

    with _opener(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no header extensions
        f.write(arr.ravel(order="F").astype(dt.newbyteorder("<")).tobytes())


def load_nifti(path):
    with _opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 352:
        raise ValueError(f"{path}: truncated NIfTI file")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        raise ValueError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim < 3:
        raise ValueError(f"{path}: expected a 3D volume, got {ndim}D")
    shape = dim[1 : 1 + ndim]
    if any(n != 1 for n in shape[3:]):
        raise ValueError(f"{path}: only 3D volumes are supported, dims {shape}")
    shape = shape[:3]
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)

    dt = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dt, count=count, offset=int(vox_offset))
    arr = data.reshape(shape, order="F")
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * slope + inter
    else:
        arr = arr.copy()
    return arr, (pixdim[1], pixdim[2], pixdim[3])


def save_raw(path, arr: np.ndarray, spacing=None) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float32)
    sidecar = {
        "shape": [int(n) for n in arr.shape],
        "spacing": [float(s) for s in spacing] if spacing is not None else None,
        "dtype": str(arr.dtype),
    }
    path = Path(path)
    path.write_bytes(arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C"))
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def load_raw(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    dt = np.dtype(meta["dtype"]).newbyteorder("<")
    arr = np.frombuffer(path.read_bytes(), dtype=dt).reshape(meta["shape"])
    spacing = tuple(meta["spacing"]) if meta.get("spacing") else None
    return arr.copy(), spacing


def save_volume(path, arr: np.ndarray, spacing=None) -> None:
    """Write a 3D array, picking the container from the file extension."""
    if _is_nifti(path):
        save_nifti(path, arr, spacing)
    else:
        save_raw(path, arr, spacing)


def load_volume(path):
    """Read a 3D array; returns (array, spacing-or-None)."""
    if _is_nifti(path):
        arr, spacing = load_nifti(path)
        return arr, spacing
    return load_raw(path)
