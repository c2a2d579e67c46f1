import json
import os
from pathlib import Path

import pytest

from longiseg import synthdata, train as train_mod
from longiseg.model import BackboneConfig, TrainConfig, load_checkpoint

# Frozen desk-scale experiment configuration (single-CPU budget):
# 22 synthetic patients at 64^3 split 12/4/6, FC-DenseNet56, 8 epochs of 480
# samples, refinement branch probability 0.5, scripted evaluation with a
# 60-scribble budget for 2 rounds.
SYNTH_CFG = dict(seed=0, shape=(64, 64, 64), n_patients=22, n_train=12, n_val=4)
TRAIN_CFG = dict(
    epochs=8, samples_per_epoch=480, batch_size=8, seed=0,
    edit_cap=20, refine_probability=0.5,
)
EVAL_ROUNDS = 2
EVAL_CAP = 60


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """Train the proposed model and the static-edit ablation on synthetic
    data and evaluate both for two scripted refinement rounds.

    Artifacts land in LONGISEG_ACCEPT_DIR when set (kept between runs for
    development); by default everything is rebuilt in a session tmp dir.
    """
    override = os.environ.get("LONGISEG_ACCEPT_DIR")
    root = Path(override) if override else tmp_path_factory.mktemp("experiment")
    root.mkdir(parents=True, exist_ok=True)

    manifest = root / "data" / "manifest.json"
    if not manifest.exists():
        manifest = synthdata.generate_dataset(synthdata.SynthConfig(**SYNTH_CFG), root / "data")
    splits = {name: synthdata.load_split(manifest, name) for name in ("train", "val", "test")}

    checkpoints = {}
    for name, zero_reference in (("proposed", False), ("static", True)):
        ckpt = root / f"{name}.pt"
        if not ckpt.exists():
            cfg = TrainConfig(**TRAIN_CFG, zero_reference=zero_reference)
            train_mod.train(
                splits["train"], splits["val"],
                BackboneConfig.fc_densenet56(seed=0), cfg,
                ckpt, root / f"{name}_train_log.csv",
            )
        checkpoints[name] = ckpt

    reports = {}
    for name, ckpt in checkpoints.items():
        cache = root / f"{name}_rounds.json"
        if cache.exists():
            reports[name] = json.loads(cache.read_text())
        else:
            model, _ = load_checkpoint(ckpt)
            rounds = train_mod.evaluate_rounds(
                model, splits["test"], EVAL_ROUNDS, cap=EVAL_CAP
            )
            reports[name] = [
                {
                    "round": r.round_index,
                    "mean_fg_dice": r.mean_fg_dice,
                    "dice_ggo": r.per_class["ggo"]["dsc"]["mean"],
                    "dice_cons": r.per_class["cons"]["dsc"]["mean"],
                    "edit_count": r.edit_count,
                }
                for r in rounds
            ]
            cache.write_text(json.dumps(reports[name]))

    return {
        "root": root,
        "manifest": manifest,
        "splits": splits,
        "checkpoints": checkpoints,
        "reports": reports,
    }
