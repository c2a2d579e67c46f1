"""Operator command line: synth, preprocess, train, eval, serve, metrics.

Every command accepts --config pointing at a TOML or JSON file whose sections
(synth/train/eval/service) mirror the corresponding config dataclasses;
explicit flags override file values. All commands are deterministic given
--seed.
"""

from __future__ import annotations

import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import click
import numpy as np

from . import io, metrics as metrics_mod, synthdata, train as train_mod
from .core import LabelMask
from .model import BackboneConfig, TrainConfig, load_checkpoint
from .preprocess import RawStudy, preprocess_pair

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise click.ClickException(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, "rb") as f:
        return tomllib.load(f)


def _build(cls, section: dict, overrides: dict):
    """Instantiate a config dataclass from a file section plus CLI overrides."""
    known = {f.name for f in dataclass_fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise click.ClickException(
            f"{cls.__name__}: unknown config fields {sorted(unknown)}"
        )
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"{cls.__name__}: {exc}")


@click.group()
def main():
    """Longitudinal interactive segmentation toolkit."""


@main.command()
@click.option("--config", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--patients", "n_patients", type=int, default=None)
@click.option("--shape", type=int, default=None, help="cubic volume edge length")
def synth(config, out, seed, n_patients, shape):
    """Generate a synthetic longitudinal dataset."""
    section = load_config(config).get("synth", {})
    overrides = {"seed": seed, "n_patients": n_patients}
    if shape is not None:
        overrides["shape"] = (shape, shape, shape)
    if n_patients is not None and "n_train" not in section:
        # scale the default 12/4/6 split to the requested cohort size
        n_val = round(n_patients * 0.2)
        n_train = min(max(1, round(n_patients * 0.55)), n_patients - n_val - 1)
        overrides.update({"n_train": n_train, "n_val": n_val})
    cfg = _build(synthdata.SynthConfig, section, overrides)
    manifest = synthdata.generate_dataset(cfg, out)
    click.echo(f"wrote {manifest}")


@main.command()
@click.option("--ref", required=True, type=click.Path(exists=True))
@click.option("--ref-lung", required=True, type=click.Path(exists=True))
@click.option("--ref-seg", required=True, type=click.Path(exists=True))
@click.option("--target", required=True, type=click.Path(exists=True))
@click.option("--target-lung", required=True, type=click.Path(exists=True))
@click.option("--backend", default="affine", help="identity | affine | external:<module:function>")
@click.option("--out", required=True, type=click.Path())
@click.option("--grid", type=int, default=150, help="output edge length")
def preprocess(ref, ref_lung, ref_seg, target, target_lung, backend, out, grid):
    """Align and normalize one longitudinal pair."""
    if backend.startswith("external:"):
        import importlib

        mod_name, _, fn_name = backend[len("external:") :].partition(":")
        backend = getattr(importlib.import_module(mod_name), fn_name)
    ref_v, _ = io.load_volume(ref)
    ref_l, _ = io.load_volume(ref_lung)
    ref_s, _ = io.load_volume(ref_seg)
    tgt_v, _ = io.load_volume(target)
    tgt_l, _ = io.load_volume(target_lung)
    vol_r, seg_r, vol_t = preprocess_pair(
        RawStudy(ref_v, ref_l, timepoint=1),
        RawStudy(tgt_v, tgt_l, timepoint=2),
        LabelMask(ref_s.astype(np.uint8)),
        backend=backend,
        target_shape=(grid, grid, grid),
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_raw(out / "ref_aligned.raw", vol_r.data)
    io.save_raw(out / "ref_seg_aligned.raw", seg_r.labels.astype(np.uint8))
    io.save_raw(out / "target.raw", vol_t.data)
    click.echo(f"wrote aligned pair to {out}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True), help="dataset manifest")
@click.option("--config", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path(), help="checkpoint path")
@click.option("--log", type=click.Path(), default=None, help="training CSV log")
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--samples-per-epoch", type=int, default=None)
@click.option("--refine-probability", type=float, default=None)
@click.option("--static", "zero_reference", is_flag=True, default=None,
              help="train the static ablation (reference channels zeroed)")
@click.option("--backbone", default="fcdensenet56", type=click.Choice(["fcdensenet56", "tiny"]))
def train(data, config, out, log, epochs, seed, samples_per_epoch, refine_probability,
          zero_reference, backbone):
    """Train a refinement model on a dataset manifest."""
    section = load_config(config).get("train", {})
    cfg = _build(
        TrainConfig,
        section,
        {
            "epochs": epochs,
            "seed": seed,
            "samples_per_epoch": samples_per_epoch,
            "refine_probability": refine_probability,
            "zero_reference": zero_reference,
        },
    )
    backbone_cfg = (
        BackboneConfig.tiny(seed=cfg.seed)
        if backbone == "tiny"
        else BackboneConfig.fc_densenet56(seed=cfg.seed)
    )
    train_patients = synthdata.load_split(data, "train")
    val_patients = synthdata.load_split(data, "val")
    if not train_patients:
        raise click.ClickException(f"no training patients in {data}")
    path, _ = train_mod.train(train_patients, val_patients, backbone_cfg, cfg, out, log)
    click.echo(f"wrote checkpoint {path}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--split", default="test")
@click.option("--rounds", type=int, default=2)
@click.option("--cap", type=int, default=60, help="scripted scribbles per round")
@click.option("--out", required=True, type=click.Path(), help="JSONL report path")
@click.option("--csv", "csv_path", type=click.Path(), default=None,
              help="Dice-vs-round CSV (plot data)")
def eval_cmd(checkpoint, data, split, rounds, cap, out, csv_path):
    """Multi-round scripted-user evaluation of a checkpoint."""
    model, _ = load_checkpoint(checkpoint)
    patients = synthdata.load_split(data, split)
    if not patients:
        raise click.ClickException(f"no patients in split {split!r} of {data}")
    reports = train_mod.evaluate_rounds(model, patients, rounds, cap)
    train_mod.write_round_reports(reports, out, csv_path)
    for r in reports:
        click.echo(
            f"round {r.round_index}: mean foreground Dice {r.mean_fg_dice:.4f} "
            f"(edits: {r.edit_count})"
        )


@main.command()
@click.option("--checkpoint", required=True,
              help="checkpoint path, or 'stub' for the test backend")
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--port", type=int, default=8000)
@click.option("--host", default="127.0.0.1")
@click.option("--edit-cap", type=int, default=20)
@click.option("--preprocess-grid", type=int, default=150)
def serve(checkpoint, data_dir, port, host, edit_cap, preprocess_grid):
    """Run the refinement session service."""
    import uvicorn

    from .service import create_app, make_backend

    backend = make_backend(checkpoint)
    app = create_app(
        backend,
        data_dir,
        edit_cap=edit_cap,
        preprocess_shape=(preprocess_grid,) * 3,
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("metrics")
@click.option("--pred", required=True, type=click.Path(exists=True))
@click.option("--gt", required=True, type=click.Path(exists=True))
def metrics_cmd(pred, gt):
    """Per-class DSC/PPV/TPR/VD between two label volumes."""
    pred_arr, _ = io.load_volume(pred)
    gt_arr, _ = io.load_volume(gt)
    try:
        pred_mask = LabelMask(pred_arr.astype(np.uint8))
        gt_mask = LabelMask(gt_arr.astype(np.uint8))
        out = {}
        for cls, name in ((1, "ggo"), (2, "cons")):
            out[name] = metrics_mod.evaluate_mask(pred_mask, gt_mask, cls)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps(out, indent=1))


if __name__ == "__main__":
    sys.exit(main())
