"""
Loss-curve and ablation charts rendered to SVG with matplotlib's Agg backend.
"""
import csv
import json
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.core.trainer import METRICS_FILE, AblationRow, read_ablation  # noqa: E402
from src.utils.logging import logger  # noqa: E402

LOSS_COLUMNS = ["phase", "epoch", "step", "total", "focal", "wh", "off", "loss_ma50", "val_ap50"]


def read_metrics(path: Union[str, Path]) -> List[Dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def epoch_records(records: Sequence[Dict]) -> List[Dict]:
    return [r for r in records if "total" in r]


def write_loss_csv(records: Sequence[Dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for record in epoch_records(records):
            writer.writerow({k: record.get(k, "") for k in LOSS_COLUMNS})
    return path


def plot_loss_curves(records: Sequence[Dict], path: Union[str, Path]) -> Path:
    rows = epoch_records(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in rows]

    fig, (ax_loss, ax_ap) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "focal", "wh", "off", "loss_ma50"):
        values = [r.get(key) for r in rows]
        if any(v is not None for v in values):
            ax_loss.plot(steps, [np.nan if v is None else v for v in values], marker="o", ms=3, label=key)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend()

    ap_points = [(r["step"], r["val_ap50"]) for r in rows if r.get("val_ap50") is not None]
    if ap_points:
        ax_ap.plot(*zip(*ap_points), marker="o", color="tab:green")
    ax_ap.set_xlabel("step")
    ax_ap.set_ylabel("val AP50")
    ax_ap.set_ylim(0, 1)

    # phase boundaries
    for prev, cur in zip(rows, rows[1:]):
        if cur["phase"] != prev["phase"]:
            for ax in (ax_loss, ax_ap):
                ax.axvline(prev["step"], color="grey", ls="--", lw=0.8)

    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_ablation(rows: Sequence[AblationRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.arange(len(rows))
    width = 0.38

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - width / 2, [r.ap for r in rows], width, label="AP")
    ax.bar(x + width / 2, [r.ap_s for r in rows], width, label="AP_S")
    ax.set_xticks(x)
    ax.set_xticklabels([f"window {r.window}" for r in rows])
    ax.set_ylabel("average precision")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def render_all(run_dir: Union[str, Path], ablation_csv: Union[str, Path, None] = None) -> List[Path]:
    run_dir = Path(run_dir)
    plots_dir = run_dir / "plots"
    written = []
    if (run_dir / METRICS_FILE).exists():
        records = read_metrics(run_dir)
        written.append(write_loss_csv(records, plots_dir / "loss_curves.csv"))
        written.append(plot_loss_curves(records, plots_dir / "loss_curves.svg"))
    ablation_csv = Path(ablation_csv) if ablation_csv else run_dir / "ablation" / "ablation.csv"
    if ablation_csv.exists():
        written.append(plot_ablation(read_ablation(ablation_csv), plots_dir / "ablation_ap_s.svg"))
    if not written:
        logger.warning(f"Nothing to plot under {run_dir}")
    return written
