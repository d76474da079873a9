from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field
from typing import Dict, Literal, Optional
import time

from src.core.checkpoint import CheckpointError
from src.core.config import ConfigError, RunConfig, get_data_root, load_run_config
from src.core.detector_service import CheckpointUnavailable, get_checkpoint_path, get_detector
from src.core.model import Detector
from src.core.synth_data import DatasetError, generate_dataset
from src.core.trainer import evaluate, mine
from src.utils.validators import resolve_output_dir, validate_dataset_dir, ValidationError
from src.utils.logging import audit_logger, logger


router = APIRouter()


class SynthRequest(BaseModel):
    preset: str = Field(default="desk", description="Run preset providing the scene configuration")
    split: Literal["train", "val", "clutter"] = Field(default="train")
    n_images: int = Field(default=16, ge=1, le=5000)
    out_dir: str = Field(..., description="Directory below the data root receiving the PNGs and manifest.json")
    seed: Optional[int] = Field(default=None, ge=0, description="Scene seed override")


class SynthResponse(BaseModel):
    out_dir: str
    split: str
    images: int
    birds: int
    success: bool = True
    execution_time_ms: float


class EvaluateRequest(BaseModel):
    preset: str = Field(default="desk")
    split_dir: str = Field(..., description="Dataset directory with manifest.json")
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint path; defaults to the serving checkpoint")
    report_dir: Optional[str] = Field(default=None, description="Write report.json and pr_curves.csv here")


class EvaluateResponse(BaseModel):
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    n_images: int
    n_gt: int
    success: bool = True
    execution_time_ms: float


class MineRequest(BaseModel):
    preset: str = Field(default="desk")
    split_dir: str = Field(..., description="Training split to mine; its manifest is updated in place")
    checkpoint: Optional[str] = Field(default=None)
    score_thresh: float = Field(default=0.3, ge=0, le=1)
    iou_thresh: float = Field(default=0.3, ge=0, le=1)


class MineResponse(BaseModel):
    hard_negatives: int
    images_with_hard_negatives: int
    success: bool = True
    execution_time_ms: float


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, HTTPException):
        return e
    if isinstance(e, ValidationError):
        status, label = 400, "Validation error"
    elif isinstance(e, CheckpointUnavailable):
        status, label = 503, "Detector unavailable"
    elif isinstance(e, (ConfigError, DatasetError, CheckpointError)):
        status, label = 422, "Pipeline error"
    else:
        status, label = 500, "Unexpected error"
    error_msg = f"{label}: {str(e)}"
    (logger.warning if status < 500 else logger.error)(error_msg)
    return HTTPException(status_code=status, detail=error_msg)


def _detector_for(checkpoint: Optional[str]) -> Detector:
    if checkpoint is None:
        return get_detector()
    return Detector.from_checkpoint(checkpoint)


def _config(preset: str, overrides: Optional[Dict] = None) -> RunConfig:
    return load_run_config(preset, overrides)


@router.post("/synth", response_model=SynthResponse)
def synth_dataset(request: SynthRequest):
    start_time = time.time()
    try:
        with audit_logger.track("synth_dataset", "/pipeline/synth", request.model_dump()) as op:
            overrides = {"data": {"scene": {"seed": request.seed}}} if request.seed is not None else None
            cfg = _config(request.preset, overrides)
            out_dir = resolve_output_dir(request.out_dir, get_data_root())
            manifest = generate_dataset(cfg.data.scene, request.n_images, out_dir, split=request.split)
            op.result_summary = {"images": len(manifest.images), "birds": len(manifest.annotations)}
    except Exception as e:
        raise _http_error(e)
    return SynthResponse(
        out_dir=str(out_dir),
        split=request.split,
        images=len(manifest.images),
        birds=len(manifest.annotations),
        execution_time_ms=round((time.time() - start_time) * 1000, 2),
    )


@router.post("/evaluate", response_model=EvaluateResponse)
def evaluate_checkpoint(request: EvaluateRequest):
    start_time = time.time()
    try:
        with audit_logger.track("evaluate", "/pipeline/evaluate", request.model_dump()) as op:
            split_dir = validate_dataset_dir(request.split_dir)
            cfg = _config(request.preset)
            report = evaluate(_detector_for(request.checkpoint), split_dir, cfg, out_dir=request.report_dir)
            op.result_summary = report.summary()
    except Exception as e:
        raise _http_error(e)
    return EvaluateResponse(
        **report.summary(),
        n_images=report.n_images,
        n_gt=report.n_gt,
        execution_time_ms=round((time.time() - start_time) * 1000, 2),
    )


@router.post("/mine-hard-negatives", response_model=MineResponse)
def mine_hard_negatives(request: MineRequest):
    start_time = time.time()
    try:
        with audit_logger.track("mine_hard_negatives", "/pipeline/mine-hard-negatives", request.model_dump()) as op:
            split_dir = validate_dataset_dir(request.split_dir)
            cfg = _config(request.preset, {
                "hard_negative": {"score_thresh": request.score_thresh, "iou_thresh": request.iou_thresh},
            })
            mined = mine(_detector_for(request.checkpoint), split_dir, cfg)
            images = len({h.image_id for h in mined.hard_negatives})
            op.result_summary = {"hard_negatives": len(mined.hard_negatives), "images": images}
    except Exception as e:
        raise _http_error(e)
    return MineResponse(
        hard_negatives=len(mined.hard_negatives),
        images_with_hard_negatives=images,
        execution_time_ms=round((time.time() - start_time) * 1000, 2),
    )


@router.get("/checkpoint")
async def checkpoint_info():
    path = get_checkpoint_path()
    return {"path": str(path), "available": path.exists()}
