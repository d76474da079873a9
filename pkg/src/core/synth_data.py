"""
Deterministic synthetic sky scenes with small dark birds.

Every image is a pure function of (SceneConfig.seed, split, image id): each
image draws from its own numpy SeedSequence stream, so generation order and
parallelism do not change the output.
"""
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field

from src.core.config import SceneConfig
from src.core.head import BBox
from src.utils.logging import logger

MANIFEST_NAME = "manifest.json"
SPLITS = {"train": 0, "val": 1, "clutter": 2}


class DatasetError(Exception):
    pass


class ImageRecord(BaseModel):
    id: int
    file: str
    width: int
    height: int


class Annotation(BaseModel):
    image_id: int
    bbox: List[float] = Field(..., min_length=4, max_length=4)
    class_id: int = 0


class HardNegative(BaseModel):
    image_id: int
    bbox: List[float] = Field(..., min_length=4, max_length=4)
    score: float


class DatasetManifest(BaseModel):
    split: str = "train"
    images: List[ImageRecord] = Field(default_factory=list)
    annotations: List[Annotation] = Field(default_factory=list)
    hard_negatives: List[HardNegative] = Field(default_factory=list)

    def boxes_by_image(self) -> Dict[int, List[BBox]]:
        out: Dict[int, List[BBox]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(BBox(*ann.bbox, class_id=ann.class_id))
        return out

    def hard_negatives_by_image(self) -> Dict[int, List[BBox]]:
        out: Dict[int, List[BBox]] = {}
        for hn in self.hard_negatives:
            out.setdefault(hn.image_id, []).append(BBox(*hn.bbox))
        return out

    def validate_consistency(self) -> None:
        sizes = {img.id: (img.width, img.height) for img in self.images}
        for ann in self.annotations + self.hard_negatives:
            if ann.image_id not in sizes:
                raise DatasetError(f"annotation references unknown image {ann.image_id}")
            w, h = sizes[ann.image_id]
            x1, y1, x2, y2 = ann.bbox
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise DatasetError(f"bbox {ann.bbox} outside image {ann.image_id} ({w}x{h})")


def image_rng(seed: int, split: str, image_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS[split], image_id])


def _sky(rng: np.random.Generator, size: int) -> np.ndarray:
    top = np.array([0.32, 0.52, 0.88]) + rng.uniform(-0.08, 0.08, 3)
    bottom = np.array([0.78, 0.86, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    t = np.linspace(0.0, 1.0, size)[:, None, None]
    sky = top[None, None, :] * (1 - t) + bottom[None, None, :] * t
    return np.broadcast_to(sky, (size, size, 3)).copy()


def _clouds(rng: np.random.Generator, image: np.ndarray, density: float) -> None:
    size = image.shape[0]
    n_blobs = rng.poisson(density * 12)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, size, 2)
        sx, sy = rng.uniform(3, 18, 2)
        tone = rng.uniform(0.55, 1.0)
        strength = rng.uniform(0.3, 0.8)
        alpha = strength * np.exp(-(((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2) / 2)
        image[...] = image * (1 - alpha[..., None]) + tone * alpha[..., None]


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _segment_distance(xx, yy, p, q) -> np.ndarray:
    px, py = p
    qx, qy = q
    vx, vy = qx - px, qy - py
    t = np.clip(((xx - px) * vx + (yy - py) * vy) / max(vx * vx + vy * vy, 1e-12), 0.0, 1.0)
    return np.hypot(xx - (px + t * vx), yy - (py + t * vy))


def _chevron_mask(size: int, cx: float, cy: float, span: float, theta: float, thickness: float) -> np.ndarray:
    """V-shaped glyph: two wings meeting at the body point, rotated by theta."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    half = span / 2
    wing_drop = span * 0.3
    points = [(-half, -wing_drop), (0.0, wing_drop * 0.5), (half, -wing_drop)]
    c, s = math.cos(theta), math.sin(theta)
    pts = [(cx + x * c - y * s, cy + x * s + y * c) for x, y in points]
    dist = np.minimum(_segment_distance(xx, yy, pts[0], pts[1]), _segment_distance(xx, yy, pts[1], pts[2]))
    return dist <= thickness / 2


def _bird_mask(rng: np.random.Generator, size: int, extent: float) -> np.ndarray:
    margin = extent / 2 + 1
    cx, cy = rng.uniform(margin, size - margin, 2)
    theta = rng.uniform(-0.5, 0.5)
    if rng.random() < 0.5:
        a = extent / 2
        b = a * rng.uniform(0.35, 0.7)
        return _ellipse_mask(size, cx, cy, a, b, theta)
    thickness = max(1.2, extent * rng.uniform(0.15, 0.25))
    return _chevron_mask(size, cx, cy, extent - thickness, theta, thickness)


def _tight_box(mask: np.ndarray) -> Optional[BBox]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Tuple[np.ndarray, List[BBox]]:
    """Returns a [3,H,W] image in [0,1] and tight boxes around every painted bird."""
    size = cfg.image_size
    image = _sky(rng, size)
    _clouds(rng, image, cfg.clutter_density)

    boxes: List[BBox] = []
    n_birds = int(rng.integers(cfg.birds_per_image[0], cfg.birds_per_image[1] + 1))
    for _ in range(n_birds):
        extent = rng.uniform(cfg.bird_size_px[0], cfg.bird_size_px[1])
        mask = _bird_mask(rng, size, extent)
        box = _tight_box(mask)
        if box is None:
            continue
        color = rng.uniform(0.03, 0.25) + np.array([0.04, 0.02, 0.0]) * rng.random()
        image[mask] = color
        boxes.append(box)

    return np.clip(image, 0.0, 1.0).transpose(2, 0, 1), boxes


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(path: Union[str, Path], image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def image_filename(image_id: int) -> str:
    return f"img_{image_id:06}.png"


def write_manifest(manifest: DatasetManifest, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    document = manifest.model_dump(mode="json")
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    return DatasetManifest.model_validate_json(path.read_text())


def generate_dataset(cfg: SceneConfig, n_images: int, out_dir: Union[str, Path], split: str = "train") -> DatasetManifest:
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
    if split == "clutter":
        cfg = cfg.model_copy(update={"birds_per_image": (0, 0)})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(split=split)
    for image_id in range(n_images):
        image, boxes = generate_scene(cfg, image_rng(cfg.seed, split, image_id))
        name = image_filename(image_id)
        save_image(out_dir / name, image)
        manifest.images.append(ImageRecord(id=image_id, file=name, width=cfg.image_size, height=cfg.image_size))
        manifest.annotations.extend(
            Annotation(image_id=image_id, bbox=box.as_list(), class_id=box.class_id) for box in boxes
        )

    manifest.validate_consistency()
    write_manifest(manifest, out_dir)
    logger.info(f"Generated {n_images} {split} images with {len(manifest.annotations)} birds in {out_dir}")
    return manifest


def load_images(manifest: DatasetManifest, root: Union[str, Path], dtype=np.float32) -> Dict[int, np.ndarray]:
    root = Path(root)
    images = {}
    for record in manifest.images:
        path = root / record.file
        if not path.exists():
            raise DatasetError(f"image file missing: {path}")
        images[record.id] = load_image(path).astype(dtype)
    return images
