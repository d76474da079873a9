import base64
import binascii
import io
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.core.config import DEFAULT_MAX_IMAGE_SIDE
from src.core.synth_data import MANIFEST_NAME

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
SIZE_MULTIPLE = 32
# hard ceiling for any decode in this process, above every configurable side
MAX_DECODE_PIXELS = 8192 * 8192
Image.MAX_IMAGE_PIXELS = MAX_DECODE_PIXELS


class ValidationError(Exception):
    pass


def validate_content_size(content: bytes, max_size_mb: int = 20) -> bool:
    max_size_bytes = max_size_mb * 1024 * 1024
    if len(content) > max_size_bytes:
        raise ValidationError(f"Content size ({len(content)} bytes) exceeds maximum allowed size ({max_size_bytes} bytes)")
    return True


def decode_base64_image(content: str) -> bytes:
    try:
        return base64.b64decode(content, validate=True)
    except (binascii.Error, ValueError) as e:
        raise ValidationError(f"Content is not valid base64: {e}")


def validate_png(content: bytes) -> bool:
    if not content:
        raise ValidationError("Empty image provided")
    if not content.startswith(PNG_SIGNATURE):
        raise ValidationError("Image must be a PNG file")
    return True


def validate_image_dimensions(width: int, height: int, max_side: int = DEFAULT_MAX_IMAGE_SIDE) -> Tuple[int, int]:
    if width % SIZE_MULTIPLE or height % SIZE_MULTIPLE:
        raise ValidationError(f"Image size {width}x{height} must be a multiple of {SIZE_MULTIPLE} on both sides")
    if width < SIZE_MULTIPLE or height < SIZE_MULTIPLE:
        raise ValidationError(f"Image must be at least {SIZE_MULTIPLE}x{SIZE_MULTIPLE}")
    if width > max_side or height > max_side:
        raise ValidationError(f"Image size {width}x{height} exceeds the maximum side of {max_side}")
    return width, height


def decode_png_image(content: bytes, max_side: int = DEFAULT_MAX_IMAGE_SIDE) -> np.ndarray:
    """PNG bytes to a [3,H,W] float array in [0,1]. Size is checked from the header before decoding."""
    validate_png(content)
    try:
        with Image.open(io.BytesIO(content)) as img:
            validate_image_dimensions(*img.size, max_side=max_side)
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except Image.DecompressionBombError as e:
        raise ValidationError(f"Image too large: {e}")
    except (UnidentifiedImageError, OSError) as e:
        raise ValidationError(f"Could not decode PNG: {e}")
    return rgb.transpose(2, 0, 1)


def validate_score_threshold(score_thresh: float) -> float:
    if not 0.0 <= score_thresh <= 1.0:
        raise ValidationError("Score threshold must lie in [0, 1]")
    return score_thresh


def validate_top_k(top_k: int, max_k: int = 1000) -> int:
    if top_k < 1 or top_k > max_k:
        raise ValidationError(f"top_k must lie in [1, {max_k}]")
    return top_k


def validate_dataset_dir(path: str) -> Path:
    directory = Path(path)
    if not (directory / MANIFEST_NAME).exists():
        raise ValidationError(f"No {MANIFEST_NAME} under {directory}")
    return directory


def resolve_output_dir(path: str, root: Path) -> Path:
    """Resolve path below root (relative paths are taken from root); reject anything outside it."""
    root = root.resolve()
    candidate = Path(path)
    resolved = (candidate if candidate.is_absolute() else root / candidate).resolve()
    if not resolved.is_relative_to(root):
        raise ValidationError(f"Output directory {path} is outside the data root {root}")
    return resolved
