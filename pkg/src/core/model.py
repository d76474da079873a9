"""
Detector: shifted-window backbone -> shifted-window neck -> center-point head.
"""
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from src.core.backbone import Backbone
from src.core.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from src.core.config import ModelConfig
from src.core.head import CenterHead, Detection, HeadOutputs, decode
from src.core.neck import Neck
from src.core.nn import Module
from src.core.tensor import Tensor, no_grad

STRIDE = 4


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: Optional[str] = None):
        super().__init__()
        self.cfg = cfg
        self.np_dtype = np.dtype(dtype or cfg.dtype)
        rng = np.random.default_rng([seed, 1])
        self.backbone = Backbone(rng, cfg, dtype=self.np_dtype)
        self.neck = Neck(rng, cfg.embed_dim, cfg.neck, dtype=self.np_dtype)
        self.head = CenterHead(rng, cfg.embed_dim, dtype=self.np_dtype)

    def __call__(self, images: Union[Tensor, np.ndarray]) -> HeadOutputs:
        if not isinstance(images, Tensor):
            images = Tensor(images, dtype=self.np_dtype)
        squeeze = images.ndim == 3
        if squeeze:
            images = images.reshape(1, *images.shape)
        feats = self.backbone(images)
        feat = self.neck(feats).transpose(0, 3, 1, 2)
        return self.head(feat[0] if squeeze else feat)

    def detect_batch(
        self,
        images: np.ndarray,
        k: int = 100,
        score_thresh: float = 0.05,
    ) -> List[List[Detection]]:
        """Inference on [B,3,H,W] images in [0,1]."""
        with no_grad():
            out = self(np.asarray(images, dtype=self.np_dtype))
        H, W = images.shape[-2:]
        return [
            decode(out.hm.data[b], out.wh.data[b], out.off.data[b], k=k, score_thresh=score_thresh,
                   stride=STRIDE, image_size=(W, H))
            for b in range(out.hm.shape[0])
        ]

    def detect(self, image: np.ndarray, k: int = 100, score_thresh: float = 0.05) -> List[Detection]:
        return self.detect_batch(image[None], k=k, score_thresh=score_thresh)[0]

    def save(self, path: Union[str, Path], extra_tensors=None, metadata=None) -> None:
        tensors = {f"model.{name}": arr for name, arr in self.state_dict().items()}
        tensors.update(extra_tensors or {})
        meta = {"model_config": self.cfg.model_dump(mode="json"), "dtype": self.np_dtype.name}
        meta.update(metadata or {})
        save_checkpoint(path, tensors, meta)

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "Detector":
        tensors, metadata = load_checkpoint(path)
        model_tensors = {name[len("model."):]: arr for name, arr in tensors.items() if name.startswith("model.")}
        if not model_tensors or "model_config" not in metadata:
            raise CheckpointError(f"checkpoint {path} holds no model weights")
        detector = cls(ModelConfig.model_validate(metadata["model_config"]), dtype=metadata.get("dtype"))
        detector.load_state_dict(model_tensors)
        return detector


def detect_images(detector: Detector, images: Sequence[np.ndarray], batch_size: int = 8, k: int = 100, score_thresh: float = 0.05) -> List[List[Detection]]:
    results: List[List[Detection]] = []
    for start in range(0, len(images), batch_size):
        chunk = np.stack(images[start:start + batch_size])
        results.extend(detector.detect_batch(chunk, k=k, score_thresh=score_thresh))
    return results
