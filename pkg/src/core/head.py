"""
Anchor-free center-point head: heatmap / size / offset branches, target
encoding, penalty-reduced focal loss, L1 regression losses and peak decoding.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.config import LossWeights
from src.core.nn import Conv2d, Module
from src.core.tensor import Tensor, relu, sigmoid
from src.utils.logging import logger

HM_CLAMP = 1e-4
PRIOR_PROB = 0.01


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float

    def to_json(self, image_id: int) -> Dict[str, float]:
        return {
            "image_id": image_id,
            "x1": self.bbox.x1,
            "y1": self.bbox.y1,
            "x2": self.bbox.x2,
            "y2": self.bbox.y2,
            "score": self.score,
        }


@dataclass
class TargetMaps:
    heatmap: np.ndarray  # [1,Hf,Wf]
    wh: np.ndarray  # [2,Hf,Wf], feature-map units
    offset: np.ndarray  # [2,Hf,Wf]
    pos_mask: np.ndarray  # [1,Hf,Wf]
    n_degenerate: int = 0


@dataclass
class HeadOutputs:
    hm: Tensor
    wh: Tensor
    off: Tensor


@dataclass
class LossBreakdown:
    total: Tensor
    focal: float
    wh: float
    off: float

    def as_dict(self) -> Dict[str, float]:
        return {"total": self.total.item(), "focal": self.focal, "wh": self.wh, "off": self.off}


class Branch(Module):
    def __init__(self, rng: np.random.Generator, dim: int, out: int, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(rng, dim, dim, kernel=3, pad=1, dtype=dtype)
        self.out = Conv2d(rng, dim, out, kernel=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(relu(self.conv(x)))


class CenterHead(Module):
    """Three conv3x3-ReLU-conv1x1 branches over a [B,D,Hf,Wf] map."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype=np.float64):
        super().__init__()
        self.hm = Branch(rng, dim, 1, dtype=dtype)
        self.wh = Branch(rng, dim, 2, dtype=dtype)
        self.off = Branch(rng, dim, 2, dtype=dtype)
        self.hm.out.bias.data[...] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)

    def __call__(self, feat: Tensor) -> HeadOutputs:
        squeeze = feat.ndim == 3
        if squeeze:
            feat = feat.reshape(1, *feat.shape)
        hm = sigmoid(self.hm(feat)).clip(HM_CLAMP, 1 - HM_CLAMP)
        outputs = HeadOutputs(hm=hm, wh=self.wh(feat), off=self.off(feat))
        if squeeze:
            outputs = HeadOutputs(*(t.reshape(t.shape[1:]) for t in (outputs.hm, outputs.wh, outputs.off)))
        return outputs


def gaussian_radius(h: float, w: float, min_overlap: float = 0.7) -> float:
    """
    Largest corner displacement keeping IoU >= min_overlap, minimised over the
    three displacement modes (shifted box, shrunk box, grown box).
    """
    if h <= 0 or w <= 0 or not 0 < min_overlap < 1:
        raise ValueError(f"invalid radius inputs h={h}, w={w}, min_overlap={min_overlap}")
    m = min_overlap
    # shifted: (h-r)(w-r) / (2hw - (h-r)(w-r)) = m
    b1 = h + w
    c1 = w * h * (1 - m) / (1 + m)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * c1, 0.0))) / 2
    # shrunk: (h-2r)(w-2r) / hw = m
    a2 = 4.0
    b2 = -2 * (h + w)
    c2 = (1 - m) * w * h
    r2 = (-b2 - math.sqrt(max(b2 * b2 - 4 * a2 * c2, 0.0))) / (2 * a2)
    # grown: hw / ((h+2r)(w+2r)) = m
    a3 = 4 * m
    b3 = 2 * m * (h + w)
    c3 = (m - 1) * w * h
    r3 = (-b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return max(0.0, min(r1, r2, r3))


def _splat_gaussian(heatmap: np.ndarray, cx: int, cy: int, sigma: float) -> None:
    Hf, Wf = heatmap.shape
    ys = np.arange(Hf)[:, None] - cy
    xs = np.arange(Wf)[None, :] - cx
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    np.maximum(heatmap, g, out=heatmap)


def encode_targets(
    boxes: Sequence[BBox],
    Hf: int,
    Wf: int,
    stride: int = 4,
    min_overlap: float = 0.7,
    hard_negatives: Sequence[BBox] = (),
    dtype=np.float64,
) -> TargetMaps:
    """
    Heatmap (max-composited Gaussians, peak 1 at each center cell), size and
    sub-cell offset at center cells. Hard-negative boxes force their center
    cell to a strict negative unless a real object sits there.
    """
    heatmap = np.zeros((Hf, Wf), dtype=dtype)
    wh = np.zeros((2, Hf, Wf), dtype=dtype)
    offset = np.zeros((2, Hf, Wf), dtype=dtype)
    pos = np.zeros((Hf, Wf), dtype=dtype)
    degenerate = 0

    for box in boxes:
        w, h = box.width, box.height
        if w <= 1 or h <= 1:
            degenerate += 1
            w, h = max(w, 1.0), max(h, 1.0)
        cx = (box.x1 + box.x2) / 2 / stride
        cy = (box.y1 + box.y2) / 2 / stride
        ix = min(int(math.floor(cx)), Wf - 1)
        iy = min(int(math.floor(cy)), Hf - 1)
        radius = gaussian_radius(h / stride, w / stride, min_overlap)
        _splat_gaussian(heatmap, ix, iy, max(radius, 1.0) / 3)
        heatmap[iy, ix] = 1.0
        wh[:, iy, ix] = (w / stride, h / stride)
        offset[:, iy, ix] = (cx - ix, cy - iy)
        pos[iy, ix] = 1.0

    for box in hard_negatives:
        ix = min(int((box.x1 + box.x2) / 2 / stride), Wf - 1)
        iy = min(int((box.y1 + box.y2) / 2 / stride), Hf - 1)
        if not pos[iy, ix]:
            heatmap[iy, ix] = 0.0

    if degenerate:
        logger.warning(f"encode_targets clamped {degenerate} degenerate box(es) to 1px")
    return TargetMaps(heatmap[None], wh, offset, pos[None], n_degenerate=degenerate)


def stack_targets(targets: Sequence[TargetMaps]) -> TargetMaps:
    return TargetMaps(
        heatmap=np.stack([t.heatmap for t in targets]),
        wh=np.stack([t.wh for t in targets]),
        offset=np.stack([t.offset for t in targets]),
        pos_mask=np.stack([t.pos_mask for t in targets]),
        n_degenerate=sum(t.n_degenerate for t in targets),
    )


def focal_loss(pred_hm: Tensor, target_hm: np.ndarray, alpha: float = 2.0, gamma: float = 6.0) -> Tensor:
    """
    Penalty-reduced focal loss; gamma is the exponent on (1 - y) at negatives.

    L = -1/N [ sum_{y=1} (1-p)^alpha log p + sum_{y<1} (1-y)^gamma p^alpha log(1-p) ],
    N = max(1, #positives).
    """
    positive = target_hm == 1
    pos_idx = np.nonzero(positive)
    neg_idx = np.nonzero(~positive)
    n_pos = max(1, int(positive.sum()))

    p_pos = pred_hm[pos_idx]
    p_neg = pred_hm[neg_idx]
    neg_weight = np.power(1.0 - target_hm[neg_idx], gamma).astype(pred_hm.dtype)

    pos_term = ((1.0 - p_pos) ** alpha * p_pos.log()).sum()
    neg_term = (p_neg ** alpha * (1.0 - p_neg).log() * neg_weight).sum()
    return (pos_term + neg_term) * (-1.0 / n_pos)


def reg_l1_loss(pred: Tensor, target: np.ndarray, pos_mask: np.ndarray) -> Tensor:
    """Absolute error at positive cells, averaged over the supervised entries (0 without positives)."""
    mask = np.broadcast_to(pos_mask, pred.shape).astype(pred.dtype)
    denom = max(1.0, float(mask.sum()))
    return ((pred - target.astype(pred.dtype)) * mask).abs().sum() * (1.0 / denom)


def total_loss(outputs: HeadOutputs, targets: TargetMaps, w: LossWeights) -> LossBreakdown:
    focal = focal_loss(outputs.hm, targets.heatmap, w.hm_alpha, w.hm_gamma)
    wh = reg_l1_loss(outputs.wh, targets.wh, targets.pos_mask)
    off = reg_l1_loss(outputs.off, targets.offset, targets.pos_mask)
    total = focal + wh * w.wh_weight + off * w.off_weight
    return LossBreakdown(total=total, focal=focal.item(), wh=wh.item(), off=off.item())


def peak_mask(hm: np.ndarray) -> np.ndarray:
    """Cells equal to the max of their 3x3 neighbourhood (ties all kept)."""
    padded = np.pad(hm, 1, constant_values=-np.inf)
    pooled = np.lib.stride_tricks.sliding_window_view(padded, (3, 3)).max(axis=(-1, -2))
    return hm == pooled


def decode(
    hm: np.ndarray,
    wh: np.ndarray,
    off: np.ndarray,
    k: int = 100,
    score_thresh: float = 0.0,
    stride: int = 4,
    image_size: Optional[Tuple[int, int]] = None,
) -> List[Detection]:
    """
    Positive peaks of a [1,Hf,Wf] heatmap to boxes in image pixels, top-k by
    score with equal scores ordered by (row, col). Boxes left with no area
    after clipping are skipped. image_size is (width, height) and defaults to
    the feature map times stride.
    """
    if k < 1:
        raise ValueError("decode needs k >= 1")
    scores_map = hm[0]
    Hf, Wf = scores_map.shape
    img_w, img_h = image_size if image_size is not None else (Wf * stride, Hf * stride)

    rows, cols = np.nonzero(peak_mask(scores_map) & (scores_map >= score_thresh) & (scores_map > 0))
    scores = scores_map[rows, cols]
    order = np.lexsort((cols, rows, -scores))

    detections = []
    for i in order:
        r, c = rows[i], cols[i]
        cx = (c + off[0, r, c]) * stride
        cy = (r + off[1, r, c]) * stride
        # the size branch is unconstrained; negative extents collapse to the center
        half_w = max(float(wh[0, r, c]), 0.0) * stride / 2
        half_h = max(float(wh[1, r, c]), 0.0) * stride / 2
        box = BBox(
            x1=float(np.clip(cx - half_w, 0, img_w)),
            y1=float(np.clip(cy - half_h, 0, img_h)),
            x2=float(np.clip(cx + half_w, 0, img_w)),
            y2=float(np.clip(cy + half_h, 0, img_h)),
        )
        if box.x2 <= box.x1 or box.y2 <= box.y1:
            continue
        detections.append(Detection(bbox=box, score=float(scores[i])))
        if len(detections) == k:
            break
    return detections
