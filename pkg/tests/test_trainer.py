"""
Tests for the training loop, resume, evaluation exports and the window ablation.

Runs use a tiny float64 detector on 64x64 scenes so a few epochs stay fast.
"""
import json

import numpy as np
import pytest

from src.core.checkpoint import load_checkpoint
from src.core.config import apply_overrides, load_run_config
from src.core.metrics import read_detections_jsonl
from src.core.trainer import (
    FINAL_CHECKPOINT,
    HARD_NEGATIVES_FILE,
    METRICS_FILE,
    AblationRow,
    Phase,
    Trainer,
    TrainingError,
    ablate_window,
    build_phases,
    evaluate,
    load_split,
    predict,
    prepare_data,
    read_ablation,
    train,
    write_ablation,
)


@pytest.fixture
def run_cfg(tmp_path):
    return load_run_config("smoke", {
        "model": {"dtype": "float64"},
        "train": {"epochs": 2, "batch_size": 2, "out_dir": str(tmp_path / "run")},
        "data": {
            "train_dir": str(tmp_path / "data" / "train"),
            "val_dir": str(tmp_path / "data" / "val"),
            "clutter_dir": str(tmp_path / "data" / "clutter"),
            "n_train": 4,
            "n_val": 2,
            "n_clutter": 2,
        },
    })


def read_metrics(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestPhases:

    def test_base_only(self, run_cfg):
        assert build_phases(run_cfg) == [Phase("base", 2, run_cfg.train.lr)]

    def test_all_phases(self, run_cfg):
        cfg = apply_overrides(run_cfg, {
            "train": {"finetune_epochs": 1, "finetune_lr": 1e-5},
            "hard_negative": {"enabled": True, "epochs": 3, "lr": 2e-5},
        })
        assert build_phases(cfg) == [
            Phase("base", 2, cfg.train.lr),
            Phase("finetune", 1, 1e-5),
            Phase("hard_negative", 3, 2e-5, hard_negative=True),
        ]

    def test_zero_epoch_phases_are_skipped(self, run_cfg):
        cfg = apply_overrides(run_cfg, {"hard_negative": {"enabled": True, "epochs": 0}})
        assert [p.name for p in build_phases(cfg)] == ["base"]


class TestPrepareData:

    def test_generates_missing_splits_once(self, run_cfg, tmp_path):
        roots = prepare_data(run_cfg)
        assert set(roots) == {"train", "val", "clutter"}
        manifest = roots["train"] / "manifest.json"
        before = manifest.stat().st_mtime_ns
        prepare_data(run_cfg)
        assert manifest.stat().st_mtime_ns == before


class TestTrain:

    def test_smoke_run_writes_artifacts(self, run_cfg):
        result = train(run_cfg)
        out = result.checkpoint.parent
        assert result.checkpoint.name == FINAL_CHECKPOINT
        assert (out / "last.ckpt").exists()
        assert (out / "checkpoints" / "base_001.ckpt").exists()
        assert (out / "checkpoints" / "base_002.ckpt").exists()
        assert (out / "report.json").exists()
        assert (out / "pr_curves.csv").exists()

        records = read_metrics(result.metrics_path)
        assert [(r["phase"], r["epoch"]) for r in records] == [("base", 1), ("base", 2)]
        for record in records:
            assert np.isfinite(record["total"])
            assert record["n_batches"] == 2
            assert 0.0 <= record["val_ap50"] <= 1.0
        assert records[-1]["step"] == 4
        assert result.report is not None and result.report.n_images == 2

    def test_seeded_runs_are_identical(self, run_cfg, tmp_path):
        first = train(run_cfg)
        second = train(apply_overrides(run_cfg, {"train": {"out_dir": str(tmp_path / "again")}}))
        assert first.metrics_path.read_text() == second.metrics_path.read_text()
        a, _ = load_checkpoint(first.checkpoint)
        b, _ = load_checkpoint(second.checkpoint)
        for name, value in a.items():
            assert b[name].tobytes() == value.tobytes(), name

    def test_rerun_without_resume_starts_fresh(self, run_cfg):
        train(run_cfg)
        result = train(run_cfg)
        assert len(read_metrics(result.metrics_path)) == 2

    def test_resume_reproduces_uninterrupted_run(self, run_cfg):
        result = train(run_cfg)
        out = result.checkpoint.parent
        straight_metrics = result.metrics_path.read_text()
        straight, straight_meta = load_checkpoint(result.checkpoint)

        resumed_result = train(run_cfg, resume_from=out / "checkpoints" / "base_001.ckpt")
        resumed, resumed_meta = load_checkpoint(resumed_result.checkpoint)

        assert resumed_result.metrics_path.read_text() == straight_metrics
        assert set(resumed) == set(straight)
        for name, value in straight.items():
            np.testing.assert_array_equal(resumed[name], value, err_msg=name)
        assert resumed_meta["run"] == straight_meta["run"]

    def test_resume_into_another_directory(self, run_cfg, tmp_path):
        result = train(run_cfg)
        other = apply_overrides(run_cfg, {"train": {"out_dir": str(tmp_path / "other")}})
        resumed = train(other, resume_from=result.checkpoint.parent / "checkpoints" / "base_001.ckpt")
        a, _ = load_checkpoint(result.checkpoint)
        b, _ = load_checkpoint(resumed.checkpoint)
        for name, value in a.items():
            np.testing.assert_array_equal(b[name], value, err_msg=name)
        # only the epoch run after resuming is logged in the new directory
        assert [r["epoch"] for r in read_metrics(resumed.metrics_path)] == [2]

    def test_float32_run(self, run_cfg):
        cfg = apply_overrides(run_cfg, {"model": {"dtype": "float32"}, "train": {"epochs": 1}})
        result = train(cfg)
        tensors, meta = load_checkpoint(result.checkpoint)
        assert meta["dtype"] == "float32"
        assert {t.dtype for name, t in tensors.items() if name.startswith("model.")} == {np.dtype(np.float32)}

    def test_hard_negative_phase(self, run_cfg):
        cfg = apply_overrides(run_cfg, {
            "train": {"epochs": 1},
            "hard_negative": {"enabled": True, "epochs": 1, "rate": 0.5},
        })
        result = train(cfg)
        out = result.checkpoint.parent
        records = read_metrics(result.metrics_path)
        phases = [r["phase"] for r in records]
        assert phases == ["base", "mine", "hard_negative", "eval"]
        mine_record = records[1]
        assert mine_record["n_hard_negatives"] >= 0
        assert "clutter_fp_before" in mine_record
        assert records[-1]["clutter_fp_after"] <= mine_record["clutter_fp_before"]
        assert (out / HARD_NEGATIVES_FILE).exists()
        assert (out / "checkpoints" / "hard_negative_001.ckpt").exists()


class TestTrainStep:

    def test_non_finite_loss_raises(self, run_cfg):
        prepare_data(run_cfg)
        split = load_split(run_cfg.data.train_dir, dtype=np.float64)
        trainer = Trainer(run_cfg, split)
        images = np.full((1, 3, 64, 64), np.nan)
        with pytest.raises(TrainingError) as ctx:
            trainer.train_step(images, trainer.batch_targets([0], hard_negatives=False), batch_ids=[0])
        assert ctx.value.batch_ids == [0]
        assert ctx.value.dump_path.exists()
        dump = json.loads(ctx.value.dump_path.read_text())
        assert dump["batch_ids"] == [0]
        assert trainer.position.step == 0

    def test_step_updates_weights(self, run_cfg):
        prepare_data(run_cfg)
        split = load_split(run_cfg.data.train_dir, dtype=np.float64)
        trainer = Trainer(run_cfg, split)
        before = {k: v.copy() for k, v in trainer.detector.state_dict().items()}
        images = np.stack([split.images[0], split.images[1]])
        values = trainer.train_step(images, trainer.batch_targets([0, 1], hard_negatives=False), [0, 1])
        assert np.isfinite(values["grad_norm"])
        assert trainer.position.step == 1
        after = trainer.detector.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_overfit_single_batch(self, run_cfg):
        cfg = apply_overrides(run_cfg, {"train": {"lr": 3e-3, "weight_decay": 0.0}, "data": {"n_train": 8}})
        prepare_data(cfg)
        split = load_split(cfg.data.train_dir, dtype=np.float64)
        trainer = Trainer(cfg, split)
        ids = list(range(8))
        images = np.stack([split.images[i] for i in ids])
        targets = trainer.batch_targets(ids, hard_negatives=False)
        focal = [trainer.train_step(images, targets, ids)["focal"] for _ in range(300)]
        assert focal[-1] < 0.05 * focal[0]

    def test_batch_targets_shape(self, run_cfg):
        prepare_data(run_cfg)
        trainer = Trainer(run_cfg, load_split(run_cfg.data.train_dir, dtype=np.float64))
        targets = trainer.batch_targets([0, 1, 2], hard_negatives=False)
        assert targets.hm.shape == (3, 1, 16, 16)


class TestEvaluateAndPredict:

    def test_evaluate_and_predict_from_checkpoint(self, run_cfg, tmp_path):
        cfg = apply_overrides(run_cfg, {"train": {"epochs": 1}})
        result = train(cfg)
        report = evaluate(result.checkpoint, cfg.data.val_dir, cfg, out_dir=tmp_path / "eval")
        assert report.n_images == 2
        assert (tmp_path / "eval" / "report.json").exists()

        out_path = tmp_path / "preds.jsonl"
        dets = predict(result.checkpoint, cfg.data.val_dir, cfg, out_path)
        assert sorted(dets) == [0, 1]
        assert read_detections_jsonl(out_path) == {i: d for i, d in dets.items() if d}


class TestAblation:

    def test_csv_round_trip(self, tmp_path):
        rows = [
            AblationRow(window=2, ap50=0.5, ap75=0.25, ap=0.3, ap_s=0.1, config_hash="abc"),
            AblationRow(window=5, ap50=1 / 3, ap75=0.0, ap=0.125, ap_s=0.0, config_hash="abc"),
        ]
        csv_path = write_ablation(rows, tmp_path)
        assert read_ablation(csv_path) == rows
        table = (tmp_path / "ablation.md").read_text().splitlines()
        assert table[0] == "| Window | AP50 | AP75 | AP | AP_S |"
        assert table[3] == "| 5 | 0.333 | 0.000 | 0.125 | 0.000 |"

    def test_ablation_runs_differ_only_in_window(self, run_cfg, tmp_path):
        cfg = apply_overrides(run_cfg, {"train": {"epochs": 1}})
        rows = ablate_window(cfg, sizes=(2, 3), out_dir=tmp_path / "ablation")
        assert [r.window for r in rows] == [2, 3]
        assert rows[0].config_hash == rows[1].config_hash
        assert read_ablation(tmp_path / "ablation" / "ablation.csv") == rows
        assert (tmp_path / "ablation" / "window_3" / FINAL_CHECKPOINT).exists()
        assert (tmp_path / "ablation" / "window_2" / METRICS_FILE).exists()
