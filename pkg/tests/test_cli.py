"""
Tests for the command-line surface: exit codes, one-line errors and JSON output.
"""
import json

import pytest

from src.cli import build_parser, main, resolve_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "preset": "smoke",
        "name": "cli-test",
        "model": {"dtype": "float64"},
        "train": {"epochs": 1, "batch_size": 2, "out_dir": str(tmp_path / "run")},
        "data": {
            "train_dir": str(tmp_path / "data" / "train"),
            "val_dir": str(tmp_path / "data" / "val"),
            "clutter_dir": str(tmp_path / "data" / "clutter"),
            "n_train": 4,
            "n_val": 2,
            "n_clutter": 2,
        },
    }))
    return path


def emitted(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.strip()]


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return lines[0]


class TestResolveConfig:

    def test_seed_only_touches_training(self):
        args = build_parser().parse_args(["train", "--config", "smoke", "--seed", "11"])
        cfg = resolve_config(args)
        assert cfg.train.seed == 11
        assert cfg.data.scene.seed == 0

    def test_flag_overrides(self):
        args = build_parser().parse_args([
            "train", "--config", "smoke", "--neck-window", "5", "--epochs", "3", "--out", "elsewhere",
            "--hard-negative-rate", "0.25",
        ])
        cfg = resolve_config(args)
        assert cfg.model.neck.window == 5
        assert cfg.train.epochs == 3
        assert cfg.train.out_dir == "elsewhere"
        assert cfg.hard_negative.enabled
        assert cfg.hard_negative.rate == 0.25

    def test_no_flags_keeps_preset(self):
        args = build_parser().parse_args(["train", "--config", "smoke"])
        assert resolve_config(args).name == "smoke"


class TestExitCodes:

    def test_missing_command_is_usage_error(self):
        with pytest.raises(SystemExit) as ctx:
            main([])
        assert ctx.value.code == 2

    def test_unknown_preset(self, capsys):
        assert main(["synth", "--config", "no-such-preset"]) == 1
        line = error_line(capsys)
        assert line.startswith("error: ConfigError: config file not found")

    def test_invalid_override(self, capsys):
        assert main(["train", "--config", "smoke", "--hard-negative-rate", "1.5"]) == 1
        assert error_line(capsys).startswith("error: ConfigError: hard_negative.rate")

    def test_eval_without_checkpoint(self, config_file, capsys):
        assert main(["eval", "--config", str(config_file)]) == 1
        assert error_line(capsys).startswith("error: UsageError: checkpoint not found")

    def test_mine_needs_checkpoint(self, config_file, capsys):
        assert main(["mine-hn", "--config", str(config_file)]) == 1
        assert error_line(capsys) == "error: UsageError: mine-hn needs --checkpoint"

    def test_data_dir_needs_single_split(self, config_file, tmp_path, capsys):
        assert main(["synth", "--config", str(config_file), "--data-dir", str(tmp_path / "x")]) == 1
        assert "UsageError" in error_line(capsys)


class TestCommands:

    def test_synth_all_splits(self, config_file, tmp_path, capsys):
        assert main(["synth", "--config", str(config_file)]) == 0
        out = emitted(capsys)
        assert [o["split"] for o in out] == ["train", "val", "clutter"]
        assert [o["images"] for o in out] == [4, 2, 2]
        assert out[2]["birds"] == 0
        assert (tmp_path / "data" / "val" / "manifest.json").exists()

    def test_synth_single_split_override(self, config_file, tmp_path, capsys):
        target = tmp_path / "extra"
        assert main(["synth", "--config", str(config_file), "--split", "val", "--n-images", "3",
                     "--data-dir", str(target)]) == 0
        manifest = json.loads((target / "manifest.json").read_text())
        assert emitted(capsys) == [{"split": "val", "dir": str(target), "images": 3,
                                    "birds": len(manifest["annotations"])}]

    def test_clutter_only(self, config_file, capsys):
        assert main(["synth", "--config", str(config_file), "--clutter-only"]) == 0
        assert [o["split"] for o in emitted(capsys)] == ["clutter"]

    def test_grad_check_subset(self, capsys):
        assert main(["grad-check", "--only", "softmax", "--skip-model"]) == 0
        out = emitted(capsys)
        assert [o["check"] for o in out] == ["softmax"]
        assert out[0]["passed"] is True

    def test_train_eval_predict_plot(self, config_file, tmp_path, capsys):
        assert main(["train", "--config", str(config_file)]) == 0
        trained = emitted(capsys)[-1]
        checkpoint = tmp_path / "run" / "model.ckpt"
        assert trained["checkpoint"] == str(checkpoint)
        assert {"ap", "ap50", "ap75", "ap_s"} <= set(trained)

        assert main(["eval", "--config", str(config_file)]) == 0
        report = emitted(capsys)[-1]
        assert report["n_images"] == 2
        assert report["ap50"] == trained["ap50"]

        assert main(["predict", "--config", str(config_file), "--checkpoint", str(checkpoint)]) == 0
        predicted = emitted(capsys)[-1]
        assert predicted["images"] == 2
        assert (tmp_path / "run" / "predictions.jsonl").exists()

        assert main(["plot", "--config", str(config_file)]) == 0
        written = emitted(capsys)[-1]["written"]
        assert str(tmp_path / "run" / "plots" / "loss_curves.svg") in written

        assert main(["mine-hn", "--config", str(config_file), "--checkpoint", str(checkpoint)]) == 0
        mined = emitted(capsys)[-1]
        assert mined["hard_negatives"] >= 0
