"""
Training loop, evaluation, prediction export and the neck-window ablation.

A run is a sequence of phases (base -> finetune -> hard_negative) sharing one
detector. Each epoch appends a record to metrics.jsonl and writes a checkpoint
holding weights, optimizer moments and the run position, so an interrupted run
resumes from the last completed epoch and reproduces the uninterrupted one.
"""
import csv
import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from src.core.checkpoint import CheckpointError, load_checkpoint
from src.core.config import RunConfig, apply_overrides, config_hash
from src.core.hard_negatives import count_false_positives, hard_negative_sampler, mine_hard_negatives
from src.core.head import Detection, TargetMaps, encode_targets, stack_targets, total_loss
from src.core.metrics import APReport, coco_suite, write_detections_jsonl, write_pr_csv, write_report
from src.core.model import STRIDE, Detector, detect_images
from src.core.optim import Adam, clip_grad_norm
from src.core.synth_data import (
    MANIFEST_NAME,
    DatasetError,
    DatasetManifest,
    generate_dataset,
    load_images,
    read_manifest,
    write_manifest,
)
from src.core.tensor import backward
from src.utils.logging import audit_logger, logger

MOVING_AVERAGE_STEPS = 50
LAST_CHECKPOINT = "last.ckpt"
FINAL_CHECKPOINT = "model.ckpt"
METRICS_FILE = "metrics.jsonl"
HARD_NEGATIVES_FILE = "hard_negatives.json"
ABLATION_EXCLUDE = ("model.neck.window", "train.out_dir", "name")


class TrainingError(Exception):
    def __init__(self, message: str, batch_ids: Sequence[int] = (), dump_path: Optional[Path] = None):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
        self.dump_path = dump_path


@dataclass
class LoadedSplit:
    manifest: DatasetManifest
    images: Dict[int, np.ndarray]
    root: Path

    @property
    def boxes(self):
        return self.manifest.boxes_by_image()


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    lr: float
    hard_negative: bool = False


@dataclass
class RunPosition:
    phase_index: int = 0
    epoch: int = 0
    step: int = 0


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    history: List[Dict[str, Any]] = field(default_factory=list)
    report: Optional[APReport] = None


def load_split(root: Union[str, Path], dtype=np.float32) -> LoadedSplit:
    root = Path(root)
    manifest = read_manifest(root)
    manifest.validate_consistency()
    return LoadedSplit(manifest=manifest, images=load_images(manifest, root, dtype=dtype), root=root)


def prepare_data(cfg: RunConfig, force: bool = False) -> Dict[str, Path]:
    """Generate any split whose manifest is missing (all of them when force is set)."""
    splits = {
        "train": (Path(cfg.data.train_dir), cfg.data.n_train),
        "val": (Path(cfg.data.val_dir), cfg.data.n_val),
        "clutter": (Path(cfg.data.clutter_dir), cfg.data.n_clutter),
    }
    out = {}
    for split, (root, n_images) in splits.items():
        if n_images == 0:
            continue
        if force or not (root / MANIFEST_NAME).exists():
            generate_dataset(cfg.data.scene, n_images, root, split=split)
        out[split] = root
    return out


def build_phases(cfg: RunConfig) -> List[Phase]:
    phases = [Phase("base", cfg.train.epochs, cfg.train.lr)]
    if cfg.train.finetune_epochs:
        phases.append(Phase("finetune", cfg.train.finetune_epochs, cfg.train.finetune_lr))
    if cfg.hard_negative.enabled and cfg.hard_negative.epochs:
        phases.append(Phase("hard_negative", cfg.hard_negative.epochs, cfg.hard_negative.lr, hard_negative=True))
    return phases


def evaluate_detector(detector: Detector, split: LoadedSplit, cfg: RunConfig) -> APReport:
    ids = [record.id for record in split.manifest.images]
    if not ids:
        raise DatasetError(f"no images to evaluate in {split.root}")
    results = detect_images(
        detector, [split.images[i] for i in ids], batch_size=cfg.train.batch_size,
        k=cfg.eval.top_k, score_thresh=cfg.eval.score_thresh,
    )
    return coco_suite(dict(zip(ids, results)), split.boxes)


class Trainer:
    def __init__(
        self,
        cfg: RunConfig,
        train_split: LoadedSplit,
        val_split: Optional[LoadedSplit] = None,
        clutter_split: Optional[LoadedSplit] = None,
        out_dir: Union[str, Path, None] = None,
    ):
        self.cfg = cfg
        self.train_split = train_split
        self.val_split = val_split
        self.clutter_split = clutter_split
        self.out_dir = Path(out_dir or cfg.train.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out_dir / METRICS_FILE
        self.run_hash = config_hash(cfg, exclude=("train.out_dir",))

        self.detector = Detector(cfg.model, seed=cfg.train.seed)
        self.params = self.detector.parameters()
        self.optimizer = Adam(
            self.params, lr=cfg.train.lr, betas=cfg.train.betas,
            eps=cfg.train.eps, weight_decay=cfg.train.weight_decay,
        )
        self.phases = build_phases(cfg)
        self.position = RunPosition()
        self.loss_window: Deque[float] = deque(maxlen=MOVING_AVERAGE_STEPS)
        self.history: List[Dict[str, Any]] = []
        self.mined: Optional[DatasetManifest] = None

        size = cfg.data.scene.image_size
        self.feature_hw = (size // STRIDE, size // STRIDE)

    # -- targets and steps -------------------------------------------------

    def batch_targets(self, image_ids: Sequence[int], hard_negatives: bool) -> TargetMaps:
        boxes = self.train_split.boxes
        negatives = self.mined.hard_negatives_by_image() if (hard_negatives and self.mined) else {}
        Hf, Wf = self.feature_hw
        return stack_targets([
            encode_targets(boxes.get(i, []), Hf, Wf, stride=STRIDE,
                           hard_negatives=negatives.get(i, ()), dtype=self.detector.np_dtype)
            for i in image_ids
        ])

    def train_step(self, images: np.ndarray, targets: TargetMaps, batch_ids: Sequence[int] = ()) -> Dict[str, float]:
        self.optimizer.zero_grad()
        outputs = self.detector(images)
        losses = total_loss(outputs, targets, self.cfg.loss)
        values = losses.as_dict()
        if not all(math.isfinite(v) for v in values.values()):
            dump = self._dump_non_finite(values, batch_ids)
            raise TrainingError(f"non-finite loss {values} at step {self.position.step} on batch {list(batch_ids)}",
                                batch_ids=batch_ids, dump_path=dump)
        backward(losses.total)
        values["grad_norm"] = clip_grad_norm(self.params, self.cfg.train.grad_clip)
        self.optimizer.step()
        self.position.step += 1
        self.loss_window.append(values["total"])
        return values

    def _dump_non_finite(self, values: Dict[str, float], batch_ids: Sequence[int]) -> Path:
        phase = self.phases[self.position.phase_index]
        path = self.out_dir / "nan_dump.json"
        path.write_text(json.dumps({
            "phase": phase.name,
            "epoch": self.position.epoch + 1,
            "step": self.position.step,
            "batch_ids": [int(i) for i in batch_ids],
            "losses": {k: repr(v) for k, v in values.items()},
        }, indent=2))
        logger.error(f"Non-finite loss on batch {list(batch_ids)}; diagnostics written to {path}")
        return path

    # -- epochs and phases -------------------------------------------------

    def epoch_rng(self, phase_index: int, epoch: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.train.seed, phase_index, epoch])

    def run_epoch(self, phase: Phase, epoch: int) -> Dict[str, Any]:
        rate = self.cfg.hard_negative.rate if phase.hard_negative else 0.0
        manifest = self.mined if (phase.hard_negative and self.mined) else self.train_split.manifest
        batches = hard_negative_sampler(
            manifest, self.cfg.train.batch_size, rate=rate,
            rng=self.epoch_rng(self.position.phase_index, epoch),
        )
        sums: Dict[str, float] = {"total": 0.0, "focal": 0.0, "wh": 0.0, "off": 0.0}
        n_batches = 0
        for batch_ids in batches:
            images = np.stack([self.train_split.images[i] for i in batch_ids])
            values = self.train_step(images, self.batch_targets(batch_ids, phase.hard_negative), batch_ids)
            for key in sums:
                sums[key] += values[key]
            n_batches += 1

        record: Dict[str, Any] = {
            "phase": phase.name,
            "phase_index": self.position.phase_index,
            "epoch": epoch,
            "step": self.position.step,
            "lr": phase.lr,
            "n_batches": n_batches,
        }
        record.update({key: value / max(n_batches, 1) for key, value in sums.items()})
        record["loss_ma50"] = float(np.mean(self.loss_window)) if self.loss_window else None
        return record

    def _mine(self) -> None:
        path = self.out_dir / HARD_NEGATIVES_FILE
        if path.exists():
            self.mined = DatasetManifest.model_validate_json(path.read_text())
            return
        start = time.time()
        hn = self.cfg.hard_negative
        record: Dict[str, Any] = {"phase": "mine", "phase_index": self.position.phase_index}
        if self.clutter_split is not None:
            record["clutter_fp_before"] = count_false_positives(
                self.detector, self.clutter_split.images, score_thresh=hn.score_thresh, iou_thresh=hn.iou_thresh)
        self.mined = mine_hard_negatives(
            self.detector, self.train_split.manifest, self.train_split.images,
            score_thresh=hn.score_thresh, iou_thresh=hn.iou_thresh, top_k=self.cfg.eval.top_k,
        )
        path.write_text(self.mined.model_dump_json(indent=2) + "\n")
        record["n_hard_negatives"] = len(self.mined.hard_negatives)
        record["n_images"] = len({h.image_id for h in self.mined.hard_negatives})
        self._append_metrics(record)
        audit_logger.log_operation(
            operation="mine_hard_negatives",
            endpoint="pipeline/train",
            parameters={"score_thresh": hn.score_thresh, "iou_thresh": hn.iou_thresh},
            success=True,
            execution_time_ms=(time.time() - start) * 1000,
            result_summary={k: v for k, v in record.items() if k.startswith(("n_", "clutter"))},
        )

    def fit(self) -> TrainResult:
        logger.info(f"Training {self.cfg.name} ({self.detector.num_parameters()} parameters) into {self.out_dir}")
        for phase_index, phase in enumerate(self.phases):
            if phase_index < self.position.phase_index:
                continue
            if phase_index > self.position.phase_index:
                self.position = RunPosition(phase_index=phase_index, epoch=0, step=self.position.step)
                self.optimizer.reset()
            self.optimizer.lr = phase.lr
            if phase.hard_negative:
                self._mine()
            start = time.time()
            for epoch in range(self.position.epoch + 1, phase.epochs + 1):
                record = self.run_epoch(phase, epoch)
                self.position.epoch = epoch
                if self.val_split is not None and (epoch % self.cfg.train.eval_every == 0 or epoch == phase.epochs):
                    record["val_ap50"] = evaluate_detector(self.detector, self.val_split, self.cfg).ap50
                self._append_metrics(record)
                self.save(self.out_dir / LAST_CHECKPOINT)
                self.save(self.out_dir / "checkpoints" / f"{phase.name}_{epoch:03}.ckpt")
                logger.info(
                    f"[{phase.name} {epoch}/{phase.epochs}] loss={record['total']:.4f} "
                    f"focal={record['focal']:.4f} wh={record['wh']:.4f} off={record['off']:.4f} "
                    f"val_ap50={record.get('val_ap50', float('nan')):.3f}"
                )
            audit_logger.log_operation(
                operation=f"train.{phase.name}",
                endpoint="pipeline/train",
                parameters={"epochs": phase.epochs, "lr": phase.lr},
                success=True,
                execution_time_ms=(time.time() - start) * 1000,
                result_summary={"step": self.position.step},
            )

        final = self.out_dir / FINAL_CHECKPOINT
        self.save(final)
        report = None
        if self.val_split is not None:
            report = evaluate_detector(self.detector, self.val_split, self.cfg)
            write_report(report, self.out_dir / "report.json")
            write_pr_csv(report, self.out_dir / "pr_curves.csv")
        if self.clutter_split is not None and self.mined is not None:
            hn = self.cfg.hard_negative
            self._append_metrics({
                "phase": "eval",
                "clutter_fp_after": count_false_positives(
                    self.detector, self.clutter_split.images, score_thresh=hn.score_thresh, iou_thresh=hn.iou_thresh),
            })
        return TrainResult(checkpoint=final, metrics_path=self.metrics_path, history=self.history, report=report)

    # -- persistence -------------------------------------------------------

    def _append_metrics(self, record: Dict[str, Any]) -> None:
        self.history.append(record)
        with open(self.metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def save(self, path: Path) -> None:
        run = {
            "config_hash": self.run_hash,
            "phase_index": self.position.phase_index,
            "epoch": self.position.epoch,
            "step": self.position.step,
            "loss_window": list(self.loss_window),
        }
        self.detector.save(path, extra_tensors=self.optimizer.state_dict(), metadata={"run": run})

    def resume(self, path: Union[str, Path]) -> None:
        tensors, metadata = load_checkpoint(path)
        run = metadata.get("run")
        if run is None:
            raise CheckpointError(f"{path} holds no run state to resume from")
        if run["config_hash"] != self.run_hash:
            logger.warning(f"Resuming from {path} written under a different config ({run['config_hash']})")
        self.detector.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
        self.optimizer.load_state_dict(tensors)
        self.position = RunPosition(run["phase_index"], run["epoch"], run["step"])
        self.loss_window = deque(run["loss_window"], maxlen=MOVING_AVERAGE_STEPS)
        if self.position.phase_index < len(self.phases):
            self.optimizer.lr = self.phases[self.position.phase_index].lr
        mined_later = any(p.hard_negative for p in self.phases[self.position.phase_index + 1:])
        if mined_later and (self.out_dir / HARD_NEGATIVES_FILE).exists():
            (self.out_dir / HARD_NEGATIVES_FILE).unlink()
        self._truncate_metrics()
        logger.info(f"Resumed at phase {self.position.phase_index} epoch {self.position.epoch} step {self.position.step}")

    def _truncate_metrics(self) -> None:
        if not self.metrics_path.exists():
            return
        kept = []
        for line in self.metrics_path.read_text().splitlines():
            record = json.loads(line)
            key = (record.get("phase_index", 0), record.get("epoch", 0))
            if record.get("phase") == "eval":
                continue
            if record.get("phase") == "mine" and record["phase_index"] > self.position.phase_index:
                continue
            if key <= (self.position.phase_index, self.position.epoch):
                kept.append(record)
        self.history = kept
        self.metrics_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))


def train(cfg: RunConfig, resume_from: Union[str, Path, None] = None, generate: bool = True) -> TrainResult:
    if generate:
        prepare_data(cfg)
    dtype = np.dtype(cfg.model.dtype)
    train_split = load_split(cfg.data.train_dir, dtype=dtype)
    val_split = load_split(cfg.data.val_dir, dtype=dtype)
    clutter_split = None
    if cfg.hard_negative.enabled and (Path(cfg.data.clutter_dir) / MANIFEST_NAME).exists():
        clutter_split = load_split(cfg.data.clutter_dir, dtype=dtype)

    trainer = Trainer(cfg, train_split, val_split, clutter_split)
    if resume_from is not None:
        trainer.resume(resume_from)
    elif trainer.metrics_path.exists():
        trainer.metrics_path.unlink()
    return trainer.fit()


def evaluate(
    checkpoint: Union[str, Path, Detector],
    split_dir: Union[str, Path],
    cfg: RunConfig,
    out_dir: Union[str, Path, None] = None,
) -> APReport:
    detector = checkpoint if isinstance(checkpoint, Detector) else Detector.from_checkpoint(checkpoint)
    split = load_split(split_dir, dtype=detector.np_dtype)
    report = evaluate_detector(detector, split, cfg)
    if out_dir is not None:
        write_report(report, Path(out_dir) / "report.json")
        write_pr_csv(report, Path(out_dir) / "pr_curves.csv")
    logger.info(f"Evaluated {report.n_images} images: " + ", ".join(f"{k}={v:.3f}" for k, v in report.summary().items()))
    return report


def predict(
    checkpoint: Union[str, Path, Detector],
    split_dir: Union[str, Path],
    cfg: RunConfig,
    out_path: Union[str, Path],
) -> Dict[int, List[Detection]]:
    detector = checkpoint if isinstance(checkpoint, Detector) else Detector.from_checkpoint(checkpoint)
    split = load_split(split_dir, dtype=detector.np_dtype)
    ids = [record.id for record in split.manifest.images]
    results = detect_images(detector, [split.images[i] for i in ids], batch_size=cfg.train.batch_size,
                            k=cfg.eval.top_k, score_thresh=cfg.eval.score_thresh)
    dets = dict(zip(ids, results))
    write_detections_jsonl(dets, out_path)
    return dets


def mine(
    checkpoint: Union[str, Path, Detector],
    split_dir: Union[str, Path],
    cfg: RunConfig,
) -> DatasetManifest:
    """Mine the split with a trained checkpoint and write the updated manifest back."""
    detector = checkpoint if isinstance(checkpoint, Detector) else Detector.from_checkpoint(checkpoint)
    split = load_split(split_dir, dtype=detector.np_dtype)
    hn = cfg.hard_negative
    mined = mine_hard_negatives(detector, split.manifest, split.images,
                                score_thresh=hn.score_thresh, iou_thresh=hn.iou_thresh, top_k=cfg.eval.top_k)
    write_manifest(mined, split.root)
    return mined


class AblationRow(BaseModel):
    window: int
    ap50: float
    ap75: float
    ap: float
    ap_s: float
    config_hash: str


ABLATION_FIELDS = list(AblationRow.model_fields)


def write_ablation(rows: Sequence[AblationRow], out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.model_dump().items()})

    lines = ["| Window | AP50 | AP75 | AP | AP_S |", "|---:|---:|---:|---:|---:|"]
    lines += [f"| {r.window} | {r.ap50:.3f} | {r.ap75:.3f} | {r.ap:.3f} | {r.ap_s:.3f} |" for r in rows]
    (out_dir / "ablation.md").write_text("\n".join(lines) + "\n")
    return csv_path


def read_ablation(path: Union[str, Path]) -> List[AblationRow]:
    with open(path, newline="") as f:
        return [AblationRow.model_validate(row) for row in csv.DictReader(f)]


def ablate_window(
    cfg: RunConfig,
    sizes: Sequence[int] = (2, 3, 5),
    out_dir: Union[str, Path, None] = None,
) -> List[AblationRow]:
    """One run per neck window size, everything else identical."""
    out_dir = Path(out_dir or Path(cfg.train.out_dir) / "ablation")
    prepare_data(cfg)
    rows = []
    for size in sizes:
        run_cfg = apply_overrides(cfg, {
            "model": {"neck": {"window": int(size)}},
            "train": {"out_dir": str(out_dir / f"window_{size}")},
        })
        result = train(run_cfg, generate=False)
        report = result.report
        rows.append(AblationRow(
            window=int(size), ap50=report.ap50, ap75=report.ap75, ap=report.ap, ap_s=report.ap_s,
            config_hash=config_hash(run_cfg, exclude=ABLATION_EXCLUDE),
        ))
    if len({row.config_hash for row in rows}) > 1:
        raise TrainingError("ablation runs differ outside the neck window")
    write_ablation(rows, out_dir)
    return rows
