"""Training loop with simulated-edit refinement and multi-round evaluation.

Training alternates per batch between the plain longitudinal input (round-1
stacks with empty optional channels) and a two-pass refinement batch: first
predictions are computed in evaluation mode without touching weights, edits
are simulated against the ground truth, and the loss is taken on the second
pass whose stacks carry the first-pass prediction and the edits. A uniform
draw decides the branch per batch.

Evaluation re-runs full-volume prediction for a number of refinement rounds
with a scripted user that scribbles on the largest remaining error regions
across all slices of all three planes, under a per-round scribble budget.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import editsim, metrics
from .core import (
    EditMask,
    LabelMask,
    PLANES,
    PLANE_AXIS,
    ProbMap,
    accumulate_edits,
    assemble_input,
    fuse_views,
    labels_from_probs,
    restack,
)
from .model import (
    BackboneConfig,
    TorchSliceModel,
    TrainConfig,
    build_model,
    make_optimizer,
    mse_loss,
    save_checkpoint,
    training_step,
)

FG_CLASSES = (1, 2)


@dataclass
class Sample:
    """One 2D training sample extracted from a longitudinal pair."""

    patient_id: str
    plane: str
    slice_index: int
    ref_slice: np.ndarray
    ref_seg: np.ndarray
    target_slice: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        shapes = {
            self.ref_slice.shape,
            self.ref_seg.shape,
            self.target_slice.shape,
            self.gt.shape,
        }
        if len(shapes) != 1:
            raise ValueError(f"sample fields disagree in shape: {sorted(shapes)}")


@dataclass
class SessionState:
    """Volumetric state carried between refinement rounds."""

    prev_max_prob: np.ndarray  # (h, w, s) float32
    prev_labels: np.ndarray  # (h, w, s) uint8
    edits: np.ndarray  # (2, h, w, s) int8, accumulated

    @classmethod
    def initial(cls, shape):
        return None  # round 1 uses empty optional channels

    def slice_state(self, plane: str, index: int):
        axis = PLANE_AXIS[plane]
        take = lambda a: np.take(a, index, axis=axis)
        prob = take(self.prev_max_prob)
        labels = take(self.prev_labels)
        edits = np.stack([np.take(self.edits[c], index, axis=axis) for c in range(2)])
        return prob, labels, edits


@dataclass
class RoundReport:
    round_index: int
    per_class: dict  # {"ggo": {"dsc": {"mean":..,"stderr":..}, ...}, "cons": ...}
    mean_fg_dice: float
    edit_count: int
    edit_voxels: int
    per_patient: list = field(default_factory=list)


CLASS_NAMES = {1: "ggo", 2: "cons"}


def patient_ids_disjoint(*splits) -> bool:
    seen = set()
    for split in splits:
        ids = {p["id"] for p in split}
        if ids & seen:
            return False
        seen |= ids
    return True


def build_samples(patients, planes=PLANES, min_foreground: int = 0) -> list:
    """Flatten patient volumes into per-slice samples, optionally keeping only
    slices with at least ``min_foreground`` ground-truth lesion voxels."""
    samples = []
    for p in patients:
        for plane in planes:
            axis = PLANE_AXIS[plane]
            n = p["v_t1"].shape[axis]
            for i in range(n):
                gt = np.take(p["s_t1"], i, axis=axis)
                if min_foreground and int((gt > 0).sum()) < min_foreground:
                    continue
                samples.append(
                    Sample(
                        patient_id=p["id"],
                        plane=plane,
                        slice_index=i,
                        ref_slice=np.take(p["v_t"], i, axis=axis),
                        ref_seg=np.take(p["s_t"], i, axis=axis),
                        target_slice=np.take(p["v_t1"], i, axis=axis),
                        gt=gt,
                    )
                )
    return samples


def _input1_stacks(batch, zero_reference=False) -> np.ndarray:
    stacks = np.stack(
        [
            assemble_input(
                s.ref_slice, LabelMask(s.ref_seg), s.target_slice
            ).channels
            for s in batch
        ]
    )
    if zero_reference:
        stacks[:, 0:3] = 0.0
    return stacks


def _input2_stacks(batch, probs1, cap, zero_reference=False):
    """Second-pass stacks carrying first-pass predictions and simulated edits.

    The edit budget ``cap`` is shared across the whole batch (largest error
    regions first), so some slices end up with prediction channels but no
    edits, matching what the model sees during budgeted multi-round
    inference.
    """
    prev = []
    for sample, prob in zip(batch, probs1):
        pm = ProbMap(prob)
        _, labels1 = labels_from_probs(pm)
        prev.append((pm, labels1))

    ranked = editsim.ranked_regions(
        ((i, prev[i][1], LabelMask(s.gt)) for i, s in enumerate(batch))
    )
    edit_arrays = [
        np.zeros((2, *s.gt.shape), dtype=np.int8) for s in batch
    ]
    for idx, region in ranked[:cap]:
        editsim.write_scribble(edit_arrays[idx], region, editsim.synthesize_scribble(region))

    stacks = []
    for sample, (pm, labels1), edits in zip(batch, prev, edit_arrays):
        stacks.append(
            assemble_input(
                sample.ref_slice,
                LabelMask(sample.ref_seg),
                sample.target_slice,
                prev_prob=pm,
                prev_labels=labels1,
                edits=EditMask(edits),
            ).channels
        )
    stacks = np.stack(stacks)
    if zero_reference:
        stacks[:, 0:3] = 0.0
    return stacks


def _labels_tensor(batch) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.gt for s in batch]).astype(np.int64))


def state_dict_digest(net) -> str:
    h = hashlib.sha256()
    for key, tensor in sorted(net.state_dict().items()):
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def eval_first_pass(net, stacks: np.ndarray) -> np.ndarray:
    """Evaluation-mode forward of the first pass; never mutates model state."""
    net.eval()
    with torch.no_grad():
        return net(torch.from_numpy(stacks)).numpy()


def _validation_dice(net, patients, cfg: TrainConfig):
    """Per-class Dice over a deterministic subset of validation slices."""
    samples = build_samples(patients, min_foreground=1)
    per_patient_budget = cfg.val_slices_per_patient
    chosen = {}
    for s in samples:
        chosen.setdefault(s.patient_id, [])
        if len(chosen[s.patient_id]) < per_patient_budget:
            chosen[s.patient_id].append(s)
    picked = [s for group in chosen.values() for s in group]
    if not picked:
        return {1: float("nan"), 2: float("nan")}
    counts = {c: [0, 0, 0] for c in FG_CLASSES}
    net.eval()
    with torch.no_grad():
        for start in range(0, len(picked), cfg.batch_size):
            batch = picked[start : start + cfg.batch_size]
            stacks = _input1_stacks(batch, cfg.zero_reference)
            probs = net(torch.from_numpy(stacks)).numpy()
            pred = probs.argmax(axis=1)
            gt = np.stack([s.gt for s in batch])
            for c in FG_CLASSES:
                pm = pred == c
                gm = gt == c
                counts[c][0] += int((pm & gm).sum())
                counts[c][1] += int((pm & ~gm).sum())
                counts[c][2] += int((~pm & gm).sum())
    return {
        c: metrics.dsc(metrics.ConfusionCounts(*counts[c])) for c in FG_CLASSES
    }


def train(
    train_patients,
    val_patients,
    backbone_cfg: BackboneConfig,
    cfg: TrainConfig,
    checkpoint_path,
    log_path=None,
):
    """Train per the two-branch refinement scheme; keeps the best-validation
    checkpoint (mean foreground Dice). Returns (checkpoint_path, history)."""
    if not train_patients:
        raise ValueError("training set is empty")
    if not patient_ids_disjoint(train_patients, val_patients):
        raise ValueError("train and val splits share patients")

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    net = build_model(backbone_cfg)
    optimizer = make_optimizer(net, cfg)

    pool = build_samples(train_patients, min_foreground=16)
    if not pool:
        pool = build_samples(train_patients)
    history = []
    best = -math.inf
    log_rows = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pool))[: cfg.samples_per_epoch]
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [pool[i] for i in order[start : start + cfg.batch_size]]
            stacks1 = _input1_stacks(batch, cfg.zero_reference)
            probs1 = eval_first_pass(net, stacks1)
            refined = bool(rng.random() < cfg.refine_probability)
            if refined:
                stacks2 = _input2_stacks(batch, probs1, cfg.edit_cap, cfg.zero_reference)
                # refinement batches train against the running BN statistics
                # so their learned behavior matches inference exactly
                loss = training_step(
                    net, optimizer, torch.from_numpy(stacks2), _labels_tensor(batch),
                    bn_eval=True,
                )
            else:
                loss = training_step(
                    net, optimizer, torch.from_numpy(stacks1), _labels_tensor(batch)
                )
            epoch_losses.append(loss)
            history.append(
                {"epoch": epoch, "refined": refined, "loss": loss}
            )
        val_dice = _validation_dice(net, val_patients, cfg) if val_patients else {1: float("nan"), 2: float("nan")}
        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        mean_val = float(np.nanmean([val_dice[1], val_dice[2]]))
        log_rows.append((epoch, "train", mean_loss, "", ""))
        log_rows.append((epoch, "val", "", val_dice[1], val_dice[2]))
        score = mean_val if not math.isnan(mean_val) else -mean_loss
        if score >= best:
            best = score
            save_checkpoint(checkpoint_path, net, cfg, epoch=epoch, val_dice=mean_val)

    if cfg.epochs == 0:
        save_checkpoint(checkpoint_path, net, cfg, epoch=0, val_dice=None)
    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "split", "loss", "dice_ggo", "dice_cons"])
            writer.writerows(log_rows)
    return checkpoint_path, history


def predict_volume(
    model,
    ref_vol: np.ndarray,
    ref_seg: np.ndarray,
    target_vol: np.ndarray,
    session_state: Optional[SessionState] = None,
    context: Optional[dict] = None,
):
    """Full-volume prediction: per-slice inference on all three planes, fused.

    ``model`` must expose ``predict_stacks(stacks, context) -> probs``; see
    :class:`longiseg.model.TorchSliceModel`. Returns (ProbMap, LabelMask) on
    the input grid.
    """
    shapes = {ref_vol.shape, ref_seg.shape, target_vol.shape}
    if session_state is not None:
        shapes |= {session_state.prev_labels.shape}
    if len(shapes) != 1:
        raise ValueError(f"volume shapes disagree: {sorted(shapes)}")

    view_probs = []
    for plane in PLANES:
        axis = PLANE_AXIS[plane]
        n = target_vol.shape[axis]
        stacks = []
        for i in range(n):
            take = lambda a: np.take(a, i, axis=axis)
            if session_state is None:
                stack = assemble_input(
                    take(ref_vol), LabelMask(take(ref_seg)), take(target_vol)
                )
            else:
                prob2d, labels2d, edits2d = session_state.slice_state(plane, i)
                # channel 4 wants the previous max probability; wrap it as a
                # degenerate ProbMap via direct channel write instead
                stack = assemble_input(
                    take(ref_vol), LabelMask(take(ref_seg)), take(target_vol)
                )
                stack.channels[4] = prob2d
                stack.channels[5] = labels2d.astype(np.float32) / 2.0
                stack.channels[6:8] = edits2d
            stacks.append(stack.channels)
        stacks = np.stack(stacks)
        probs = model.predict_stacks(
            stacks, context={**(context or {}), "plane": plane}
        )
        # reassemble (n, classes, a, b) into (classes, h, w, s)
        vol = np.stack(
            [restack([probs[i, c] for i in range(n)], plane) for c in range(probs.shape[1])]
        )
        view_probs.append(ProbMap(vol))

    fused, labels = fuse_views(*view_probs)
    return fused, labels


def _slice_to_volume_coords(plane: str, index: int, coords: np.ndarray) -> tuple:
    """Map 2D slice coordinates back to (r, c, s) volume indices."""
    if plane == "axial":  # slice is (h, w) at s = index
        return coords[:, 0], coords[:, 1], np.full(len(coords), index)
    if plane == "coronal":  # slice is (w, s) at h = index
        return np.full(len(coords), index), coords[:, 0], coords[:, 1]
    # sagittal: slice is (h, s) at w = index
    return coords[:, 0], np.full(len(coords), index), coords[:, 1]


_PLANE_ORDER = {p: i for i, p in enumerate(PLANES)}


def scripted_round_edits(
    pred_labels: np.ndarray, gt: np.ndarray, cap: int, k: int = editsim.DEFAULT_TOPK
):
    """One round of scripted-user feedback over a whole volume.

    Error regions are collected per slice on all three planes (top-``k`` per
    slice), ranked globally by area with deterministic tie-breaking, and the
    ``cap`` largest receive scribbles. Returns (EditMask volume, scribbles).
    """
    def slice_pairs():
        for plane in PLANES:
            axis = PLANE_AXIS[plane]
            for i in range(gt.shape[axis]):
                yield (
                    (_PLANE_ORDER[plane], i),
                    LabelMask(np.take(pred_labels, i, axis=axis)),
                    LabelMask(np.take(gt, i, axis=axis)),
                )

    ranked = editsim.ranked_regions(slice_pairs(), k)
    edits = np.zeros((2, *gt.shape), dtype=np.int8)
    drawn = 0
    for (plane_order, index), region in ranked[:cap]:
        scribble = editsim.synthesize_scribble(region)
        rr, cc, ss = _slice_to_volume_coords(PLANES[plane_order], index, scribble)
        value = 1 if region.polarity == "under" else -1
        edits[region.cls - 1, rr, cc, ss] = value
        drawn += 1
    return EditMask(edits), drawn


def _aggregate(values):
    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr)) if len(arr) else float("nan")
    stderr = float(np.std(arr, ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return {"mean": mean, "stderr": stderr}


def _measure(labels: np.ndarray, gt: np.ndarray) -> dict:
    out = {}
    for c in FG_CLASSES:
        cc = metrics.confusion(LabelMask(labels), LabelMask(gt), c)
        entry = {
            "dsc": metrics.dsc(cc),
            "ppv": metrics.ppv(cc),
            "tpr": metrics.tpr(cc),
        }
        gt_count = cc.tp + cc.fn
        pred_count = cc.tp + cc.fp
        entry["vd"] = (
            metrics.vd(pred_count, gt_count)
            if (gt_count > 0 or pred_count == 0)
            else float("nan")
        )
        out[c] = entry
    return out


def evaluate_rounds(model, patients, n_rounds: int, cap: int = 60) -> list:
    """Round-0 prediction plus ``n_rounds`` scripted refinement rounds.

    Returns one RoundReport per round with per-class metric means and
    standard errors across patients.
    """
    if n_rounds < 0:
        raise ValueError("n_rounds must be >= 0")
    states = {}
    preds = {}
    reports = []
    for rnd in range(n_rounds + 1):
        round_edit_count = 0
        round_edit_voxels = 0
        per_patient = []
        for p in patients:
            pid = p["id"]
            if rnd == 0:
                fused, labels = predict_volume(
                    model, p["v_t"], p["s_t"], p["v_t1"], None, context={"patient": pid}
                )
            else:
                prev_fused, prev_labels = preds[pid]
                current, drawn = scripted_round_edits(prev_labels.labels, p["s_t1"], cap)
                previous = states.get(pid)
                accumulated = (
                    accumulate_edits(previous, current) if previous is not None else current
                )
                states[pid] = accumulated
                round_edit_count += drawn
                round_edit_voxels += int(np.count_nonzero(current.edits))
                state = SessionState(
                    prev_max_prob=prev_fused.max_prob,
                    prev_labels=prev_labels.labels,
                    edits=accumulated.edits,
                )
                fused, labels = predict_volume(
                    model, p["v_t"], p["s_t"], p["v_t1"], state, context={"patient": pid}
                )
            preds[pid] = (fused, labels)
            per_patient.append({"id": pid, "metrics": _measure(labels.labels, p["s_t1"])})

        per_class = {}
        for c in FG_CLASSES:
            per_class[CLASS_NAMES[c]] = {
                m: _aggregate(
                    [
                        pp["metrics"][c][m]
                        for pp in per_patient
                        if not math.isnan(pp["metrics"][c][m])
                    ]
                )
                for m in ("dsc", "ppv", "tpr", "vd")
            }
        fg = [
            np.mean([pp["metrics"][1]["dsc"], pp["metrics"][2]["dsc"]])
            for pp in per_patient
        ]
        reports.append(
            RoundReport(
                round_index=rnd,
                per_class=per_class,
                mean_fg_dice=float(np.mean(fg)) if fg else float("nan"),
                edit_count=round_edit_count,
                edit_voxels=round_edit_voxels,
                per_patient=per_patient,
            )
        )
    return reports


def write_round_reports(reports, jsonl_path, csv_path=None):
    """Metrics report: one JSON object per (round, class, metric); optional
    Dice-vs-round CSV for plotting."""
    with open(jsonl_path, "w") as f:
        for report in reports:
            for cls_name, entries in report.per_class.items():
                for metric, agg in entries.items():
                    f.write(
                        json.dumps(
                            {
                                "round": report.round_index,
                                "cls": cls_name,
                                "metric": metric,
                                "mean": agg["mean"],
                                "stderr": agg["stderr"],
                                "edit_count": report.edit_count,
                            }
                        )
                        + "\n"
                    )
    if csv_path is not None:
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "dice_ggo", "dice_cons", "mean_fg_dice", "edit_count"])
            for report in reports:
                writer.writerow(
                    [
                        report.round_index,
                        report.per_class["ggo"]["dsc"]["mean"],
                        report.per_class["cons"]["dsc"]["mean"],
                        report.mean_fg_dice,
                        report.edit_count,
                    ]
                )
