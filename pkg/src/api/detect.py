from fastapi import APIRouter, File, Form, HTTPException, UploadFile
from pydantic import BaseModel, Field
from typing import List
import time

from src.core.checkpoint import CheckpointError
from src.core.config import get_max_image_side
from src.core.detector_service import CheckpointUnavailable, get_detector
from src.core.head import Detection
from src.utils.validators import (
    decode_base64_image,
    decode_png_image,
    validate_content_size,
    validate_score_threshold,
    validate_top_k,
    ValidationError,
)
from src.utils.logging import audit_logger, logger


router = APIRouter()


class DetectionModel(BaseModel):
    x1: float
    y1: float
    x2: float
    y2: float
    score: float

    @classmethod
    def from_detection(cls, det: Detection) -> "DetectionModel":
        return cls(x1=det.bbox.x1, y1=det.bbox.y1, x2=det.bbox.x2, y2=det.bbox.y2, score=det.score)


class DetectBase64Request(BaseModel):
    content: str = Field(..., description="Base64-encoded PNG image")
    score_thresh: float = Field(default=0.3, ge=0, le=1, description="Minimum detection score")
    top_k: int = Field(default=100, ge=1, le=1000, description="Maximum number of detections")


class DetectResponse(BaseModel):
    detections: List[DetectionModel]
    image_width: int
    image_height: int
    success: bool = True
    execution_time_ms: float


def _run_detection(content: bytes, score_thresh: float, top_k: int, endpoint: str) -> DetectResponse:
    start_time = time.time()
    parameters = {"content": content, "score_thresh": score_thresh, "top_k": top_k}

    def audit(success: bool, summary: dict, error: str = None):
        audit_logger.log_operation(
            operation="detect_birds",
            endpoint=endpoint,
            parameters=parameters,
            success=success,
            execution_time_ms=(time.time() - start_time) * 1000,
            result_summary=summary,
            error_message=error,
        )

    try:
        validate_content_size(content)
        validate_score_threshold(score_thresh)
        validate_top_k(top_k)
        image = decode_png_image(content, max_side=get_max_image_side())

        detector = get_detector()
        detections = detector.detect(image.astype(detector.np_dtype), k=top_k, score_thresh=score_thresh)

        execution_time = (time.time() - start_time) * 1000
        response = DetectResponse(
            detections=[DetectionModel.from_detection(d) for d in detections],
            image_width=image.shape[2],
            image_height=image.shape[1],
            execution_time_ms=round(execution_time, 2),
        )
        audit(True, {"detections": len(detections), "image_size": [image.shape[2], image.shape[1]]})
        logger.info(f"Detected {len(detections)} birds in {execution_time:.2f}ms")
        return response

    except ValidationError as e:
        error_msg = f"Validation error: {str(e)}"
        audit(False, {}, error_msg)
        logger.warning(error_msg)
        raise HTTPException(status_code=400, detail=error_msg)

    except CheckpointUnavailable as e:
        error_msg = f"Detector unavailable: {str(e)}"
        audit(False, {}, error_msg)
        logger.error(error_msg)
        raise HTTPException(status_code=503, detail=error_msg)

    except CheckpointError as e:
        error_msg = f"Checkpoint error: {str(e)}"
        audit(False, {}, error_msg)
        logger.error(error_msg)
        raise HTTPException(status_code=422, detail=error_msg)

    except Exception as e:
        error_msg = f"Unexpected error: {str(e)}"
        audit(False, {}, error_msg)
        logger.error(error_msg)
        raise HTTPException(status_code=500, detail=error_msg)


@router.post("/image", response_model=DetectResponse)
def detect_image(
    file: UploadFile = File(..., description="PNG image, sides a multiple of 32"),
    score_thresh: float = Form(default=0.3),
    top_k: int = Form(default=100),
):
    content = file.file.read()
    return _run_detection(content, score_thresh, top_k, "/detect/image")


@router.post("/base64", response_model=DetectResponse)
def detect_base64(request: DetectBase64Request):
    try:
        content = decode_base64_image(request.content)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail=f"Validation error: {str(e)}")
    return _run_detection(content, request.score_thresh, request.top_k, "/detect/base64")
