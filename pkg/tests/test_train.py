import json

import numpy as np
import pytest
import torch

from longiseg import synthdata, train
from longiseg.core import PLANE_AXIS, EditMask, LabelMask, ProbMap, labels_from_probs
from longiseg.model import BackboneConfig, TorchSliceModel, TrainConfig, build_model
from longiseg.train import (
    SessionState,
    build_samples,
    eval_first_pass,
    evaluate_rounds,
    patient_ids_disjoint,
    predict_volume,
    scripted_round_edits,
    state_dict_digest,
    write_round_reports,
)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    cfg = synthdata.SynthConfig(shape=(24, 24, 24), n_patients=5, n_train=2, n_val=1, seed=21)
    manifest = synthdata.generate_dataset(cfg, tmp_path_factory.mktemp("data"))
    return {
        "train": synthdata.load_split(manifest, "train"),
        "val": synthdata.load_split(manifest, "val"),
        "test": synthdata.load_split(manifest, "test"),
    }


def one_hot_probs(labels):
    probs = np.zeros((3, *labels.shape), dtype=np.float32)
    for c in range(3):
        probs[c][labels == c] = 1.0
    return probs


class RecordingStub:
    """Captures every stack batch it is asked to predict."""

    zero_reference = False

    def __init__(self):
        self.calls = []

    def predict_stacks(self, stacks, context=None):
        self.calls.append((dict(context or {}), stacks.copy()))
        n, _, h, w = stacks.shape
        probs = np.zeros((n, 3, h, w), dtype=np.float32)
        probs[:, 0] = 1.0
        return probs


class OracleStub:
    """Answers with the exact ground truth of the requested patient."""

    zero_reference = False

    def __init__(self, patients):
        self.gt = {p["id"]: p["s_t1"] for p in patients}

    def predict_stacks(self, stacks, context=None):
        gt = self.gt[context["patient"]]
        moved = np.moveaxis(gt, PLANE_AXIS[context["plane"]], 0)
        return np.stack([one_hot_probs(moved[i]) for i in range(moved.shape[0])])


class TestSplitsAndSamples:
    def test_patient_disjoint(self, tiny_dataset):
        assert patient_ids_disjoint(
            tiny_dataset["train"], tiny_dataset["val"], tiny_dataset["test"]
        )
        overlap = [tiny_dataset["train"][0]]
        assert not patient_ids_disjoint(tiny_dataset["train"], overlap)

    def test_build_samples_counts(self, tiny_dataset):
        samples = build_samples(tiny_dataset["val"])
        assert len(samples) == 3 * 24  # three planes, full slice coverage
        shapes = {s.ref_slice.shape for s in samples}
        assert shapes == {(24, 24)}

    def test_min_foreground_filter(self, tiny_dataset):
        all_slices = build_samples(tiny_dataset["val"])
        lesions_only = build_samples(tiny_dataset["val"], min_foreground=1)
        assert 0 < len(lesions_only) < len(all_slices)
        assert all((s.gt > 0).sum() >= 1 for s in lesions_only)


class TestTrainLoop:
    def make_cfg(self, **kw):
        base = dict(
            epochs=1, samples_per_epoch=8, batch_size=4, seed=3, val_slices_per_patient=2
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_eval_first_pass_does_not_mutate(self, tiny_dataset):
        net = build_model(BackboneConfig.tiny(seed=0))
        samples = build_samples(tiny_dataset["train"])[:4]
        stacks = train._input1_stacks(samples)
        before = state_dict_digest(net)
        eval_first_pass(net, stacks)
        assert state_dict_digest(net) == before

    def test_refine_probability_zero_single_pass(self, tiny_dataset, tmp_path):
        cfg = self.make_cfg(refine_probability=0.0)
        _, history = train.train(
            tiny_dataset["train"],
            tiny_dataset["val"],
            BackboneConfig.tiny(seed=1),
            cfg,
            tmp_path / "a.pt",
        )
        assert history and not any(h["refined"] for h in history)

    def test_refine_probability_one_double_pass(self, tiny_dataset, tmp_path):
        cfg = self.make_cfg(refine_probability=1.0)
        _, history = train.train(
            tiny_dataset["train"],
            tiny_dataset["val"],
            BackboneConfig.tiny(seed=1),
            cfg,
            tmp_path / "b.pt",
        )
        assert history and all(h["refined"] for h in history)

    def test_seeded_runs_identical(self, tiny_dataset, tmp_path):
        cfg = self.make_cfg(epochs=2)
        _, h1 = train.train(
            tiny_dataset["train"], tiny_dataset["val"],
            BackboneConfig.tiny(seed=2), cfg, tmp_path / "c1.pt",
        )
        _, h2 = train.train(
            tiny_dataset["train"], tiny_dataset["val"],
            BackboneConfig.tiny(seed=2), cfg, tmp_path / "c2.pt",
        )
        assert [h["loss"] for h in h1] == [h["loss"] for h in h2]
        assert [h["refined"] for h in h1] == [h["refined"] for h in h2]

    def test_training_log_written(self, tiny_dataset, tmp_path):
        cfg = self.make_cfg()
        train.train(
            tiny_dataset["train"], tiny_dataset["val"],
            BackboneConfig.tiny(seed=1), cfg, tmp_path / "d.pt", tmp_path / "log.csv",
        )
        lines = (tmp_path / "log.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,split,loss,dice_ggo,dice_cons"
        assert len(lines) == 1 + 2 * cfg.epochs

    def test_overlapping_splits_rejected(self, tiny_dataset, tmp_path):
        with pytest.raises(ValueError):
            train.train(
                tiny_dataset["train"], tiny_dataset["train"],
                BackboneConfig.tiny(seed=1), self.make_cfg(), tmp_path / "e.pt",
            )

    def test_input2_carries_first_pass_outputs(self, tiny_dataset):
        samples = build_samples(tiny_dataset["train"], min_foreground=1)[:2]
        rng = np.random.default_rng(0)
        raw = rng.random((len(samples), 3, 24, 24)).astype(np.float32)
        probs1 = raw / raw.sum(axis=1, keepdims=True)
        stacks = train._input2_stacks(samples, probs1, cap=20)
        for i, sample in enumerate(samples):
            pm = ProbMap(probs1[i])
            _, labels1 = labels_from_probs(pm)
            assert np.allclose(stacks[i, 4], pm.max_prob)
            assert np.allclose(stacks[i, 5], labels1.labels / 2.0)
            # edits reference the same first-pass prediction
            edits = stacks[i, 6:8]
            for cls in (1, 2):
                plus = np.argwhere(edits[cls - 1] == 1)
                for r, c in plus:
                    assert sample.gt[r, c] == cls and labels1.labels[r, c] != cls


class TestPredictVolume:
    def test_round1_stacks_have_empty_optional_channels(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        stub = RecordingStub()
        predict_volume(stub, p["v_t"], p["s_t"], p["v_t1"])
        assert {c["plane"] for c, _ in stub.calls} == {"axial", "coronal", "sagittal"}
        for _, stacks in stub.calls:
            assert not stacks[:, 4:8].any()
            assert stacks.shape[1] == 8

    def test_session_state_reaches_stacks(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        shape = p["v_t1"].shape
        rng = np.random.default_rng(1)
        state = SessionState(
            prev_max_prob=rng.random(shape).astype(np.float32),
            prev_labels=rng.integers(0, 3, size=shape).astype(np.uint8),
            edits=rng.integers(-1, 2, size=(2, *shape)).astype(np.int8),
        )
        stub = RecordingStub()
        predict_volume(stub, p["v_t"], p["s_t"], p["v_t1"], state)
        for ctx, stacks in stub.calls:
            axis = PLANE_AXIS[ctx["plane"]]
            for i in range(stacks.shape[0]):
                assert np.allclose(stacks[i, 4], np.take(state.prev_max_prob, i, axis=axis))
                assert np.allclose(
                    stacks[i, 5], np.take(state.prev_labels, i, axis=axis) / 2.0
                )

    def test_identical_calls_identical_outputs(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        model = TorchSliceModel(build_model(BackboneConfig.tiny(seed=4)))
        f1, l1 = predict_volume(model, p["v_t"], p["s_t"], p["v_t1"])
        f2, l2 = predict_volume(model, p["v_t"], p["s_t"], p["v_t1"])
        assert np.array_equal(f1.probs, f2.probs)
        assert np.array_equal(l1.labels, l2.labels)

    def test_shape_mismatch(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        with pytest.raises(ValueError):
            predict_volume(RecordingStub(), p["v_t"][:-1], p["s_t"], p["v_t1"])


class TestScriptedEdits:
    def test_respects_budget_and_polarity(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        pred = np.zeros_like(p["s_t1"])
        edits, drawn = scripted_round_edits(pred, p["s_t1"], cap=10)
        assert drawn <= 10
        assert isinstance(edits, EditMask)
        for cls in (1, 2):
            plus = edits.edits[cls - 1] == 1
            assert not (plus & (p["s_t1"] != cls)).any()

    def test_perfect_prediction_draws_nothing(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        edits, drawn = scripted_round_edits(p["s_t1"].copy(), p["s_t1"], cap=10)
        assert drawn == 0 and not edits.edits.any()

    def test_deterministic(self, tiny_dataset):
        p = tiny_dataset["test"][0]
        pred = np.zeros_like(p["s_t1"])
        a, _ = scripted_round_edits(pred, p["s_t1"], cap=15)
        b, _ = scripted_round_edits(pred, p["s_t1"], cap=15)
        assert np.array_equal(a.edits, b.edits)


class TestEvaluateRounds:
    def test_zero_rounds_single_report(self, tiny_dataset):
        reports = evaluate_rounds(OracleStub(tiny_dataset["test"]), tiny_dataset["test"], 0)
        assert len(reports) == 1
        assert reports[0].edit_count == 0

    def test_oracle_backend_perfect_metrics(self, tiny_dataset):
        patients = tiny_dataset["test"]
        reports = evaluate_rounds(OracleStub(patients), patients, 2, cap=20)
        assert len(reports) == 3
        for report in reports:
            assert report.edit_count == 0
            assert report.mean_fg_dice == pytest.approx(1.0)
            for cls_name in ("ggo", "cons"):
                for metric, target in (("dsc", 1.0), ("ppv", 1.0), ("tpr", 1.0), ("vd", 0.0)):
                    assert report.per_class[cls_name][metric]["mean"] == pytest.approx(target)

    def test_metric_ranges(self, tiny_dataset):
        model = TorchSliceModel(build_model(BackboneConfig.tiny(seed=6)))
        reports = evaluate_rounds(model, tiny_dataset["test"], 1, cap=10)
        for report in reports:
            for cls_name in ("ggo", "cons"):
                for metric in ("dsc", "ppv", "tpr"):
                    value = report.per_class[cls_name][metric]["mean"]
                    assert 0.0 <= value <= 1.0
                assert report.per_class[cls_name]["vd"]["mean"] >= 0.0

    def test_report_files(self, tiny_dataset, tmp_path):
        reports = evaluate_rounds(OracleStub(tiny_dataset["test"]), tiny_dataset["test"], 1)
        write_round_reports(reports, tmp_path / "r.jsonl", tmp_path / "r.csv")
        rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert {r["metric"] for r in rows} == {"dsc", "ppv", "tpr", "vd"}
        assert {r["cls"] for r in rows} == {"ggo", "cons"}
        assert {r["round"] for r in rows} == {0, 1}
        csv_lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert csv_lines[0] == "round,dice_ggo,dice_cons,mean_fg_dice,edit_count"
        assert len(csv_lines) == 3
