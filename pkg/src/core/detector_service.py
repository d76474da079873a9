"""
Process-wide detector for the HTTP service, loaded lazily from the configured
checkpoint.
"""
import os
from pathlib import Path
from threading import Lock
from typing import Optional

from src.core.checkpoint import CheckpointError
from src.core.config import PROJECT_ROOT, load_mcp_config
from src.core.model import Detector
from src.utils.logging import logger

CHECKPOINT_ENV = "BIRDSWIN_CHECKPOINT"

_detector: Optional[Detector] = None
_loaded_from: Optional[Path] = None
_lock = Lock()


class CheckpointUnavailable(CheckpointError):
    pass


def get_checkpoint_path() -> Path:
    configured = os.environ.get(CHECKPOINT_ENV)
    if not configured:
        configured = load_mcp_config().get("checkpoint_path", "runs/desk/model.ckpt")
    path = Path(configured)
    return path if path.is_absolute() else PROJECT_ROOT / path


def checkpoint_available() -> bool:
    return get_checkpoint_path().exists()


def get_detector() -> Detector:
    """Load (once per checkpoint path) and return the serving detector."""
    global _detector, _loaded_from
    path = get_checkpoint_path()
    with _lock:
        if _detector is None or _loaded_from != path:
            if not path.exists():
                raise CheckpointUnavailable(f"no checkpoint at {path}")
            _detector = Detector.from_checkpoint(path)
            _loaded_from = path
            logger.info(f"Loaded detector from {path} ({_detector.num_parameters()} parameters)")
        return _detector


def reset_detector() -> None:
    global _detector, _loaded_from
    with _lock:
        _detector = None
        _loaded_from = None
