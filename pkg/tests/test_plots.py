import csv
import json

from src.core.plots import read_metrics, render_all, write_loss_csv
from src.core.trainer import METRICS_FILE, AblationRow, write_ablation

RECORDS = [
    {"phase": "base", "phase_index": 0, "epoch": 1, "step": 4, "total": 3.0, "focal": 2.5, "wh": 0.3, "off": 0.2,
     "loss_ma50": 3.0, "val_ap50": 0.1},
    {"phase": "base", "phase_index": 0, "epoch": 2, "step": 8, "total": 2.0, "focal": 1.6, "wh": 0.2, "off": 0.2,
     "loss_ma50": 2.5, "val_ap50": 0.2},
    {"phase": "mine", "phase_index": 1, "n_hard_negatives": 3},
    {"phase": "hard_negative", "phase_index": 1, "epoch": 1, "step": 12, "total": 1.5, "focal": 1.2, "wh": 0.1,
     "off": 0.2, "loss_ma50": 2.1},
]


def write_run(run_dir):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / METRICS_FILE).write_text("".join(json.dumps(r) + "\n" for r in RECORDS))


class TestLossCsv:

    def test_only_epoch_records(self, tmp_path):
        path = write_loss_csv(RECORDS, tmp_path / "loss.csv")
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["phase"] for r in rows] == ["base", "base", "hard_negative"]
        assert rows[2]["val_ap50"] == ""
        assert rows[1]["total"] == "2.0"


class TestRenderAll:

    def test_writes_charts(self, tmp_path):
        write_run(tmp_path)
        write_ablation([
            AblationRow(window=2, ap50=0.5, ap75=0.2, ap=0.25, ap_s=0.2, config_hash="h"),
            AblationRow(window=3, ap50=0.4, ap75=0.1, ap=0.2, ap_s=0.15, config_hash="h"),
        ], tmp_path / "ablation")
        written = render_all(tmp_path)
        assert [p.name for p in written] == ["loss_curves.csv", "loss_curves.svg", "ablation_ap_s.svg"]
        for path in written:
            assert path.stat().st_size > 0
        assert "<svg" in (tmp_path / "plots" / "loss_curves.svg").read_text()

    def test_empty_run_dir(self, tmp_path):
        assert render_all(tmp_path) == []

    def test_read_metrics_accepts_dir_or_file(self, tmp_path):
        write_run(tmp_path)
        assert read_metrics(tmp_path) == RECORDS
        assert read_metrics(tmp_path / METRICS_FILE) == RECORDS
