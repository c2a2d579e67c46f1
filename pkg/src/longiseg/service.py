"""HTTP refinement-session service: the backend behind the scribble UI.

Sessions are persisted as a directory of volume files plus a manifest. Each
session holds an append-only list of refinement rounds; round 1 is the
initial prediction, later rounds are produced from user strokes. Stroke
rasterization, edit accumulation and re-prediction all run server-side so a
persisted stroke log replays to a bit-identical final mask.

Within one session, round submissions are serialized: a submission must name
the round it was based on, and exactly one submission wins per round index
(the loser gets 409). Different sessions are fully independent.
"""

from __future__ import annotations

import base64
import math
import json
import threading
import time
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response
from starlette.datastructures import UploadFile

from . import io
from .core import (
    EditMask,
    LabelMask,
    PLANE_AXIS,
    PLANES,
    ProbMap,
    accumulate_edits,
)
from .editsim import digital_line
from .model import load_checkpoint
from .preprocess import RawStudy, preprocess_pair
from .train import SessionState, _measure, predict_volume

DEFAULT_BRUSH_RADIUS = 0


def encode_rle(labels: np.ndarray) -> list:
    """Row-major run-length encoding: a flat [value, length, ...] list."""
    flat = np.asarray(labels).ravel(order="C")
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.concatenate(([0], changes))
    ends = np.concatenate((changes, [flat.size]))
    out = []
    for s, e in zip(starts, ends):
        out.extend((int(flat[s]), int(e - s)))
    return out


def decode_rle(shape, rle) -> np.ndarray:
    values = np.asarray(rle[0::2], dtype=np.uint8)
    lengths = np.asarray(rle[1::2], dtype=np.int64)
    return np.repeat(values, lengths).reshape(shape, order="C")


def _disk_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    span = np.arange(-r, r + 1)
    dr, dc = np.meshgrid(span, span, indexing="ij")
    keep = dr**2 + dc**2 <= r**2
    return np.stack([dr[keep], dc[keep]], axis=1)


def rasterize_stroke(stroke: dict, slice_shape) -> np.ndarray:
    """Polyline -> (n, 2) voxel coordinates, dilated by the brush radius and
    clipped to the slice."""
    pts = np.asarray(stroke["polyline"], dtype=np.float64)
    ipts = np.round(pts).astype(np.int64)
    segments = [digital_line(ipts[i], ipts[i + 1]) for i in range(max(len(ipts) - 1, 0))]
    line = np.concatenate(segments) if segments else ipts[:1]
    radius = int(stroke.get("brush_radius", DEFAULT_BRUSH_RADIUS))
    if radius > 0:
        offsets = _disk_offsets(radius)
        line = (line[:, None, :] + offsets[None, :, :]).reshape(-1, 2)
    keep = (
        (line[:, 0] >= 0)
        & (line[:, 0] < slice_shape[0])
        & (line[:, 1] >= 0)
        & (line[:, 1] < slice_shape[1])
    )
    voxels = np.unique(line[keep], axis=0)
    return voxels


def _slice_shape(volume_shape, plane: str):
    h, w, s = volume_shape
    return {"axial": (h, w), "coronal": (w, s), "sagittal": (h, s)}[plane]


def _validate_stroke(idx: int, stroke: dict, volume_shape):
    def bad(msg):
        raise HTTPException(status_code=422, detail=f"stroke {idx}: {msg}")

    plane = stroke.get("plane")
    if plane not in PLANES:
        bad(f"unknown plane {plane!r}")
    axis = PLANE_AXIS[plane]
    index = stroke.get("slice_index")
    if not isinstance(index, int) or not 0 <= index < volume_shape[axis]:
        bad(f"slice_index {index!r} out of range for plane {plane}")
    if stroke.get("cls") not in (1, 2):
        bad(f"cls must be 1 or 2, got {stroke.get('cls')!r}")
    if stroke.get("polarity") not in (1, -1):
        bad(f"polarity must be +1 or -1, got {stroke.get('polarity')!r}")
    polyline = stroke.get("polyline")
    if not polyline:
        bad("polyline is empty")
    shape2d = _slice_shape(volume_shape, plane)
    for r, c in polyline:
        if not (0 <= round(r) < shape2d[0] and 0 <= round(c) < shape2d[1]):
            bad(f"point ({r}, {c}) outside slice bounds {shape2d}")
    if int(stroke.get("brush_radius", 0)) < 0:
        bad("brush_radius must be >= 0")


def strokes_to_edits(strokes: list, volume_shape) -> np.ndarray:
    """Rasterize validated strokes into a (2, h, w, s) edit array."""
    edits = np.zeros((2, *volume_shape), dtype=np.int8)
    for stroke in strokes:
        plane = stroke["plane"]
        index = stroke["slice_index"]
        voxels = rasterize_stroke(stroke, _slice_shape(volume_shape, plane))
        if plane == "axial":
            rr, cc, ss = voxels[:, 0], voxels[:, 1], index
        elif plane == "coronal":
            rr, cc, ss = index, voxels[:, 0], voxels[:, 1]
        else:
            rr, cc, ss = voxels[:, 0], index, voxels[:, 1]
        edits[stroke["cls"] - 1, rr, cc, ss] = stroke["polarity"]
    return edits


class StubBackend:
    """Deterministic stand-in model for UI tests and demos.

    Initial prediction thresholds the target intensities; refinement starts
    from the previous labels and applies the accumulated edits verbatim.
    """

    name = "stub"
    zero_reference = False

    def __init__(self, ggo_range=(0.35, 0.6), cons_min=0.6):
        self.ggo_range = ggo_range
        self.cons_min = cons_min

    def _probmap(self, labels: np.ndarray) -> ProbMap:
        probs = np.zeros((3, *labels.shape), dtype=np.float32)
        for c in range(3):
            probs[c][labels == c] = 1.0
        return ProbMap(probs)

    def initial(self, ref_vol, ref_seg, target_vol):
        labels = np.zeros(target_vol.shape, dtype=np.uint8)
        labels[(target_vol > self.ggo_range[0]) & (target_vol <= self.ggo_range[1])] = 1
        labels[target_vol > self.cons_min] = 2
        return self._probmap(labels), LabelMask(labels)

    def refine(self, ref_vol, ref_seg, target_vol, state: SessionState):
        labels = state.prev_labels.copy()
        for c in (1, 2):
            labels[state.edits[c - 1] == 1] = c
            labels[(state.edits[c - 1] == -1) & (labels == c)] = 0
        return self._probmap(labels), LabelMask(labels)


class TorchBackend:
    """Checkpoint-backed model running the three-plane fused prediction."""

    def __init__(self, checkpoint_path):
        self.model, self.meta = load_checkpoint(checkpoint_path)
        self.name = str(checkpoint_path)

    def initial(self, ref_vol, ref_seg, target_vol):
        return predict_volume(self.model, ref_vol, ref_seg, target_vol, None)

    def refine(self, ref_vol, ref_seg, target_vol, state):
        return predict_volume(self.model, ref_vol, ref_seg, target_vol, state)


def make_backend(spec: str):
    if spec == "stub":
        return StubBackend()
    return TorchBackend(spec)


class SessionStore:
    """Directory-backed session registry with per-session serialization."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks = {}
        self._registry_lock = threading.Lock()

    def lock(self, sid: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(sid, threading.Lock())

    def path(self, sid: str) -> Path:
        p = self.root / sid
        if not p.is_dir():
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return p

    def manifest(self, sid: str) -> dict:
        return json.loads((self.path(sid) / "manifest.json").read_text())

    def write_manifest(self, sid: str, manifest: dict):
        manifest["updated"] = time.time()
        (self.path(sid) / "manifest.json").write_text(json.dumps(manifest, indent=1))

    def ids(self):
        return sorted(p.name for p in self.root.iterdir() if (p / "manifest.json").exists())


async def _read_upload(upload: UploadFile, field: str, shapes: dict, as_mask: bool):
    data = await upload.read()
    name = upload.filename or ""
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        import tempfile

        suffix = ".nii.gz" if name.endswith(".nii.gz") else ".nii"
        with tempfile.NamedTemporaryFile(suffix=suffix, delete=True) as f:
            f.write(data)
            f.flush()
            arr, _ = io.load_nifti(f.name)
        return arr.astype(np.uint8) if as_mask else arr.astype(np.float32)
    shape = shapes.get(field)
    if shape is None:
        raise HTTPException(
            status_code=422,
            detail=f"raw upload {field!r} requires its shape in the 'shapes' form field",
        )
    dtype = np.uint8 if as_mask else np.dtype("<f4")
    arr = np.frombuffer(data, dtype=dtype)
    try:
        return arr.reshape(shape).copy()
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=f"{field}: {exc}")


def create_app(backend, data_dir, edit_cap: int = 20, preprocess_shape=None) -> FastAPI:
    app = FastAPI(title="longiseg refinement service")
    store = SessionStore(data_dir)
    app.state.store = store
    app.state.backend = backend

    def session_dir(sid):
        return store.path(sid)

    def load_arrays(sid):
        d = session_dir(sid)
        out = {}
        for key in ("ref", "ref_seg", "target", "gt"):
            f = d / f"{key}.raw"
            if f.exists():
                out[key], _ = io.load_raw(f)
        return out

    def round_files(sid, index):
        d = session_dir(sid)
        return {
            "labels": d / f"r{index:03d}_labels.raw",
            "maxprob": d / f"r{index:03d}_maxprob.raw",
            "edits": d / f"r{index:03d}_edits.raw",
        }

    def store_round(sid, index, prob: ProbMap, labels: LabelMask, accumulated, strokes, edit_count, gt):
        files = round_files(sid, index)
        io.save_raw(files["labels"], labels.labels.astype(np.uint8))
        io.save_raw(files["maxprob"], prob.max_prob.astype(np.float32))
        io.save_raw(files["edits"], accumulated.astype(np.int8))
        entry = {
            "index": index,
            "edit_count": edit_count,
            "strokes": strokes,
            "metrics": None,
        }
        if gt is not None:
            measured = _measure(labels.labels, gt)
            entry["metrics"] = {
                ("ggo" if c == 1 else "cons"): {
                    # undefined VD (empty gt, non-empty prediction) -> null
                    k: (None if isinstance(v, float) and math.isnan(v) else v)
                    for k, v in vals.items()
                }
                for c, vals in measured.items()
            }
        return entry

    @app.get("/health")
    def health():
        return {"status": "ok", "backend": getattr(backend, "name", "unknown")}

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        form = await request.form()
        shapes = json.loads(form.get("shapes", "{}"))
        uploads = {}
        for key in ("ref_volume", "ref_seg", "target_volume", "gt", "ref_lung", "target_lung"):
            item = form.get(key)
            if item is None:
                continue
            if not isinstance(item, UploadFile):
                raise HTTPException(status_code=422, detail=f"{key} must be a file upload")
            uploads[key] = await _read_upload(
                item, key, shapes, as_mask=key in ("ref_seg", "gt", "ref_lung", "target_lung")
            )
        for required in ("ref_volume", "ref_seg", "target_volume"):
            if required not in uploads:
                raise HTTPException(status_code=422, detail=f"missing upload {required!r}")

        if "ref_lung" in uploads and "target_lung" in uploads:
            try:
                ref_v, ref_s, tgt_v = preprocess_pair(
                    RawStudy(uploads["ref_volume"], uploads["ref_lung"]),
                    RawStudy(uploads["target_volume"], uploads["target_lung"]),
                    LabelMask(uploads["ref_seg"]),
                    target_shape=preprocess_shape or (150, 150, 150),
                )
            except Exception as exc:
                raise HTTPException(status_code=422, detail=f"preprocessing failed: {exc}")
            ref, ref_seg, target = ref_v.data, ref_s.labels, tgt_v.data
            gt = None
        else:
            ref = uploads["ref_volume"].astype(np.float32)
            ref_seg = uploads["ref_seg"].astype(np.uint8)
            target = uploads["target_volume"].astype(np.float32)
            gt = uploads.get("gt")
            shapes_seen = {ref.shape, ref_seg.shape, target.shape} | (
                {gt.shape} if gt is not None else set()
            )
            if len(shapes_seen) != 1:
                raise HTTPException(
                    status_code=422, detail=f"volume shapes disagree: {sorted(shapes_seen)}"
                )

        sid = uuid.uuid4().hex[:12]
        d = store.root / sid
        d.mkdir()
        io.save_raw(d / "ref.raw", ref.astype(np.float32))
        io.save_raw(d / "ref_seg.raw", ref_seg.astype(np.uint8))
        io.save_raw(d / "target.raw", target.astype(np.float32))
        if gt is not None:
            io.save_raw(d / "gt.raw", gt.astype(np.uint8))
        manifest = {
            "id": sid,
            "created": time.time(),
            "updated": time.time(),
            "shape": list(target.shape),
            "has_gt": gt is not None,
            "model_ref": getattr(backend, "name", "unknown"),
            "edit_cap": edit_cap,
            "rounds": [],
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return {"id": sid, "shape": manifest["shape"], "has_gt": manifest["has_gt"]}

    @app.post("/sessions/{sid}/initial")
    def run_initial(sid: str):
        with store.lock(sid):
            manifest = store.manifest(sid)
            if manifest["rounds"]:
                raise HTTPException(status_code=409, detail="initial round already exists")
            arrays = load_arrays(sid)
            prob, labels = backend.initial(arrays["ref"], arrays["ref_seg"], arrays["target"])
            accumulated = np.zeros((2, *arrays["target"].shape), dtype=np.int8)
            entry = store_round(
                sid, 1, prob, labels, accumulated, [], 0, arrays.get("gt")
            )
            manifest["rounds"].append(entry)
            store.write_manifest(sid, manifest)
            return {"index": entry["index"], "edit_count": entry["edit_count"], "metrics": entry["metrics"]}

    @app.post("/sessions/{sid}/rounds")
    def submit_edits(sid: str, body: dict):
        strokes = body.get("strokes", [])
        base_round = body.get("base_round")
        with store.lock(sid):
            manifest = store.manifest(sid)
            if not manifest["rounds"]:
                raise HTTPException(status_code=409, detail="run the initial round first")
            latest = manifest["rounds"][-1]["index"]
            if base_round is not None and base_round != latest:
                raise HTTPException(
                    status_code=409,
                    detail=f"round conflict: base_round {base_round} != latest {latest}",
                )
            arrays = load_arrays(sid)
            shape = tuple(arrays["target"].shape)
            for i, stroke in enumerate(strokes):
                _validate_stroke(i, stroke, shape)

            current = strokes_to_edits(strokes, shape)
            prev_edits, _ = io.load_raw(round_files(sid, latest)["edits"])
            accumulated = accumulate_edits(
                EditMask(prev_edits), EditMask(current)
            ).edits
            prev_labels, _ = io.load_raw(round_files(sid, latest)["labels"])
            prev_maxprob, _ = io.load_raw(round_files(sid, latest)["maxprob"])
            state = SessionState(
                prev_max_prob=prev_maxprob.astype(np.float32),
                prev_labels=prev_labels.astype(np.uint8),
                edits=accumulated,
            )
            prob, labels = backend.refine(
                arrays["ref"], arrays["ref_seg"], arrays["target"], state
            )
            entry = store_round(
                sid,
                latest + 1,
                prob,
                labels,
                accumulated,
                strokes,
                len(strokes),
                arrays.get("gt"),
            )
            manifest["rounds"].append(entry)
            store.write_manifest(sid, manifest)
            return {"index": entry["index"], "edit_count": entry["edit_count"], "metrics": entry["metrics"]}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        manifest = store.manifest(sid)
        rounds = [
            {"index": r["index"], "edit_count": r["edit_count"], "metrics": r["metrics"]}
            for r in manifest["rounds"]
        ]
        return {
            "id": manifest["id"],
            "shape": manifest["shape"],
            "has_gt": manifest["has_gt"],
            "model_ref": manifest["model_ref"],
            "rounds": rounds,
        }

    @app.get("/sessions")
    def list_sessions():
        out = []
        for sid in store.ids():
            m = store.manifest(sid)
            out.append({"id": sid, "rounds": len(m["rounds"]), "shape": m["shape"]})
        return out

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        import shutil

        d = store.path(sid)
        with store.lock(sid):
            shutil.rmtree(d)
        return Response(status_code=204)

    def _round_entry(sid, rnd):
        manifest = store.manifest(sid)
        for entry in manifest["rounds"]:
            if entry["index"] == rnd:
                return manifest, entry
        raise HTTPException(status_code=404, detail=f"session {sid} has no round {rnd}")

    @app.get("/sessions/{sid}/rounds/{rnd}")
    def get_round(sid: str, rnd: int):
        manifest, entry = _round_entry(sid, rnd)
        labels, _ = io.load_raw(round_files(sid, rnd)["labels"])
        return {
            "index": entry["index"],
            "edit_count": entry["edit_count"],
            "metrics": entry["metrics"],
            "shape": manifest["shape"],
            "labels_rle": encode_rle(labels),
        }

    @app.get("/sessions/{sid}/rounds/{rnd}/mask")
    def get_mask(sid: str, rnd: int, format: str = "rle"):
        manifest, _ = _round_entry(sid, rnd)
        labels, _ = io.load_raw(round_files(sid, rnd)["labels"])
        if format == "raw":
            return Response(
                content=labels.astype(np.uint8).tobytes(order="C"),
                media_type="application/octet-stream",
                headers={"X-Shape": ",".join(str(n) for n in labels.shape)},
            )
        if format != "rle":
            raise HTTPException(status_code=422, detail=f"unknown format {format!r}")
        return JSONResponse({"shape": list(labels.shape), "rle": encode_rle(labels)})

    @app.get("/sessions/{sid}/rounds/{rnd}/maxprob")
    def get_maxprob(sid: str, rnd: int):
        _round_entry(sid, rnd)
        maxprob, _ = io.load_raw(round_files(sid, rnd)["maxprob"])
        return Response(
            content=maxprob.astype(np.float32).tobytes(order="C"),
            media_type="application/octet-stream",
            headers={"X-Shape": ",".join(str(n) for n in maxprob.shape)},
        )

    @app.get("/sessions/{sid}/slices/{plane}/{index}")
    def get_slice(sid: str, plane: str, index: int, volume: str = "target"):
        if plane not in PLANES:
            raise HTTPException(status_code=422, detail=f"unknown plane {plane!r}")
        arrays = load_arrays(sid)
        key = {"target": "target", "reference": "ref"}.get(volume)
        if key is None:
            raise HTTPException(status_code=422, detail=f"unknown volume {volume!r}")
        vol = arrays[key]
        axis = PLANE_AXIS[plane]
        if not 0 <= index < vol.shape[axis]:
            raise HTTPException(status_code=422, detail=f"slice {index} out of range")
        sl = np.take(vol, index, axis=axis)
        u8 = np.clip(sl * 255.0, 0, 255).astype(np.uint8)
        return {
            "shape": list(u8.shape),
            "plane": plane,
            "index": index,
            "data": base64.b64encode(u8.tobytes(order="C")).decode("ascii"),
        }

    return app


def replay_session(session_dir, backend):
    """Re-run a persisted session's stroke log from scratch.

    Returns the final label volume; used to verify replay determinism.
    """
    session_dir = Path(session_dir)
    manifest = json.loads((session_dir / "manifest.json").read_text())
    ref, _ = io.load_raw(session_dir / "ref.raw")
    ref_seg, _ = io.load_raw(session_dir / "ref_seg.raw")
    target, _ = io.load_raw(session_dir / "target.raw")

    prob, labels = backend.initial(ref, ref_seg, target)
    accumulated = np.zeros((2, *target.shape), dtype=np.int8)
    for entry in manifest["rounds"][1:]:
        current = strokes_to_edits(entry["strokes"], target.shape)
        accumulated = accumulate_edits(EditMask(accumulated), EditMask(current)).edits
        state = SessionState(
            prev_max_prob=prob.max_prob.astype(np.float32),
            prev_labels=labels.labels.astype(np.uint8),
            edits=accumulated,
        )
        prob, labels = backend.refine(ref, ref_seg, target, state)
    return labels.labels.astype(np.uint8)
