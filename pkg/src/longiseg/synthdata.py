"""Deterministic synthetic longitudinal lung phantoms.

Each patient is a procedurally generated scene: an ellipsoidal two-lobe lung,
bright vessel-like distractor tracks, hazy mid-intensity GGO blobs and dense
CONS blobs placed preferentially low in the lung. CONS intensity deliberately
overlaps the vessel distractors so that class is hard to segment from
intensity alone. The follow-up timepoint reuses the same scene with lesions
dilated/eroded by the progression factor and everything warped by a smooth
random deformation, so ground truth masks track the lesions exactly and the
image pair stays texturally consistent.

Volumes are emitted already normalized to [0, 1] on the model grid, i.e. as
if they had been through preprocessing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io
from .preprocess import DeformationField, apply_deformation


@dataclass
class SynthConfig:
    seed: int = 0
    shape: tuple = (64, 64, 64)
    n_patients: int = 22
    n_train: int = 12
    n_val: int = 4
    lesion_count_range: tuple = (2, 6)
    class_mix: tuple = (0.6, 0.4)  # GGO vs CONS share of lesion budget
    progression_factor: float = 1.25
    deformation_voxels: float = 1.5
    noise_level: float = 0.08

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        if min(self.shape) < 16:
            raise ValueError(f"shape must be >= 16 per axis, got {self.shape}")
        if self.progression_factor <= 0:
            raise ValueError("progression_factor must be > 0")
        if self.n_train + self.n_val >= self.n_patients:
            raise ValueError("need at least one test patient")


@dataclass
class SynthPatient:
    patient_id: str
    v_t: np.ndarray
    s_t: np.ndarray
    lung_t: np.ndarray
    v_t1: np.ndarray
    s_t1: np.ndarray
    lung_t1: np.ndarray


def _ellipsoid(shape, center, radii):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float32) for n in shape], indexing="ij")
    d = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return d <= 1.0


def _lung_mask(shape, rng):
    h, w, s = shape
    mask = np.zeros(shape, dtype=bool)
    for side in (0.30, 0.70):
        center = (
            h * (0.50 + rng.uniform(-0.03, 0.03)),
            w * (side + rng.uniform(-0.02, 0.02)),
            s * (0.50 + rng.uniform(-0.03, 0.03)),
        )
        radii = (
            h * rng.uniform(0.30, 0.36),
            w * rng.uniform(0.15, 0.19),
            s * rng.uniform(0.34, 0.40),
        )
        mask |= _ellipsoid(shape, center, radii)
    return mask


def _vessel_mask(shape, lung, rng, n_tracks=6):
    mask = np.zeros(shape, dtype=bool)
    inside = np.argwhere(lung)
    steps = int(0.6 * max(shape))
    for _ in range(n_tracks):
        pos = inside[rng.integers(len(inside))].astype(np.float64)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for _ in range(steps):
            ipos = np.round(pos).astype(int)
            if (ipos < 0).any() or (ipos >= shape).any():
                break
            mask[tuple(ipos)] = True
            direction += rng.normal(scale=0.35, size=3)
            direction /= np.linalg.norm(direction)
            pos += direction
    mask = ndimage.binary_dilation(mask, iterations=1)
    return mask & lung


def _lesion_blob(shape, lung, rng, low_bias=False):
    """One irregular blob inside the lung; optionally biased to low slice indices."""
    inside = np.argwhere(lung)
    if low_bias:
        cutoff = np.quantile(inside[:, 2], 0.4)
        low = inside[inside[:, 2] <= cutoff]
        if len(low):
            inside = low
    center = inside[rng.integers(len(inside))]
    radii = rng.uniform(0.06, 0.13, size=3) * np.array(shape)
    blob = _ellipsoid(shape, center.astype(np.float32), radii)
    rough = ndimage.gaussian_filter(rng.standard_normal(shape), 2.0)
    rough /= max(rough.std(), 1e-8)
    soft = ndimage.gaussian_filter(blob.astype(np.float32), 1.5) + 0.25 * rough
    return (soft > 0.5) & lung


def _place_lesions(shape, lung, rng, target_fraction, max_blobs, low_bias):
    mask = np.zeros(shape, dtype=bool)
    lung_count = int(lung.sum())
    for _ in range(max_blobs):
        if mask.sum() / lung_count >= target_fraction:
            break
        mask |= _lesion_blob(shape, lung, rng, low_bias=low_bias)
    return mask


def _smooth_noise(shape, rng, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return (field / max(field.std(), 1e-8)).astype(np.float32)


def _render(lung, vessels, ggo, cons, fine, coarse, noise_level):
    img = 0.55 + 0.04 * coarse  # soft tissue outside the lung
    air = 0.12 + 0.5 * noise_level * fine
    img = np.where(lung, air, img)
    img = np.where(vessels & ~ggo & ~cons, 0.72 + 0.05 * fine, img)

    ggo_alpha = np.clip(ndimage.gaussian_filter(ggo.astype(np.float32), 0.8) * 1.4, 0, 1)
    ggo_tex = 0.42 + 0.10 * coarse + noise_level * fine
    img = img * (1 - ggo_alpha) + ggo_alpha * ggo_tex

    cons_alpha = np.clip(ndimage.gaussian_filter(cons.astype(np.float32), 0.6) * 1.6, 0, 1)
    cons_tex = 0.74 + 0.05 * fine
    img = img * (1 - cons_alpha) + cons_alpha * cons_tex
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _morph(mask, progression_factor, lung):
    iterations = int(round(abs(progression_factor - 1.0) * 4))
    if iterations == 0 or not mask.any():
        return mask.copy()
    if progression_factor > 1.0:
        out = ndimage.binary_dilation(mask, iterations=iterations) & lung
    else:
        out = ndimage.binary_erosion(mask, iterations=iterations)
    return out


def _deformation(shape, rng, amplitude):
    if amplitude == 0:
        return DeformationField.identity(shape)
    disp = np.stack(
        [_smooth_noise(shape, rng, 6.0) * amplitude for _ in range(3)]
    )
    return DeformationField(disp)


def generate_patient(cfg: SynthConfig, patient_seed: int) -> SynthPatient:
    """Deterministically generate one longitudinal pair with exact ground truth."""
    rng = np.random.default_rng(patient_seed)
    shape = cfg.shape

    lung = _lung_mask(shape, rng)
    vessels = _vessel_mask(shape, lung, rng)
    ggo_target = rng.uniform(0.08, 0.20) * cfg.class_mix[0] / max(cfg.class_mix)
    cons_target = rng.uniform(0.08, 0.20) * cfg.class_mix[1] / max(cfg.class_mix)
    max_blobs = int(cfg.lesion_count_range[1]) * 4
    ggo = _place_lesions(shape, lung, rng, ggo_target, max_blobs, low_bias=False)
    cons = _place_lesions(shape, lung, rng, cons_target, max_blobs, low_bias=True)
    cons &= ~ggo

    fine = _smooth_noise(shape, rng, 1.0)
    coarse = _smooth_noise(shape, rng, 4.0)

    v_t = _render(lung, vessels, ggo, cons, fine, coarse, cfg.noise_level)
    s_t = np.zeros(shape, dtype=np.uint8)
    s_t[ggo] = 1
    s_t[cons] = 2

    ggo2 = _morph(ggo, cfg.progression_factor, lung)
    cons2 = _morph(cons, cfg.progression_factor, lung) & ~ggo2
    field = _deformation(shape, rng, cfg.deformation_voxels)

    def warp_mask(m):
        return apply_deformation(m.astype(np.uint8), field, "mask").astype(bool)

    lung2 = warp_mask(lung)
    vessels2 = warp_mask(vessels) & lung2
    ggo2 = warp_mask(ggo2) & lung2
    cons2 = warp_mask(cons2) & lung2 & ~ggo2
    fine2 = apply_deformation(fine, field, "image")
    coarse2 = apply_deformation(coarse, field, "image")

    v_t1 = _render(lung2, vessels2, ggo2, cons2, fine2, coarse2, cfg.noise_level)
    s_t1 = np.zeros(shape, dtype=np.uint8)
    s_t1[ggo2] = 1
    s_t1[cons2] = 2

    return SynthPatient(
        patient_id=f"synth{patient_seed:04d}",
        v_t=v_t,
        s_t=s_t,
        lung_t=lung.astype(np.uint8),
        v_t1=v_t1,
        s_t1=s_t1,
        lung_t1=lung2.astype(np.uint8),
    )


def generate_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write patient-disjoint train/val/test splits; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = []
    for i in range(cfg.n_patients):
        seed = cfg.seed * 100_000 + i
        patient = generate_patient(cfg, seed)
        files = {}
        for name, arr in (
            ("v_t", patient.v_t),
            ("s_t", patient.s_t),
            ("lung_t", patient.lung_t),
            ("v_t1", patient.v_t1),
            ("s_t1", patient.s_t1),
            ("lung_t1", patient.lung_t1),
        ):
            rel = f"{patient.patient_id}_{name}.raw"
            io.save_raw(out_dir / rel, arr)
            files[name] = rel
        if i < cfg.n_train:
            split = "train"
        elif i < cfg.n_train + cfg.n_val:
            split = "val"
        else:
            split = "test"
        lung_count = max(int(patient.lung_t.sum()), 1)
        patients.append(
            {
                "id": patient.patient_id,
                "seed": seed,
                "split": split,
                "files": files,
                "stats": {
                    "ggo_fraction": float((patient.s_t == 1).sum() / lung_count),
                    "cons_fraction": float((patient.s_t == 2).sum() / lung_count),
                },
            }
        )
    manifest = {
        "config": {**asdict(cfg), "shape": list(cfg.shape)},
        "preprocessed": True,
        "patients": patients,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_split(manifest_path, split: str):
    """Load one split as a list of dicts with the six arrays plus the id."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    out = []
    for rec in manifest["patients"]:
        if rec["split"] != split:
            continue
        arrays = {
            name: io.load_raw(root / rel)[0] for name, rel in rec["files"].items()
        }
        arrays["id"] = rec["id"]
        out.append(arrays)
    return out
