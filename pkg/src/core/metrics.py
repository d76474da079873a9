"""
COCO-style detection metrics: IoU, greedy matching, 101-point interpolated
AP, and the AP / AP50 / AP75 / AP_S suite over a dataset.
"""
import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from src.core.head import BBox, Detection

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100.0
SMALL_AREA = 32 * 32


class MatchFlag(str, Enum):
    TP = "TP"
    FP = "FP"
    IGNORED = "IGNORED"


@dataclass
class MatchResult:
    """Flags and scores in score-descending order, plus non-ignored GTs left unmatched."""

    scores: List[float] = field(default_factory=list)
    flags: List[MatchFlag] = field(default_factory=list)
    gt_index: List[Optional[int]] = field(default_factory=list)
    n_unmatched_gt: int = 0


class ThresholdCurve(BaseModel):
    iou_thresh: float
    ap: float
    ap_s: float
    recall: List[float]
    precision: List[float]


class APReport(BaseModel):
    ap: float = Field(..., ge=0.0, le=1.0)
    ap50: float = Field(..., ge=0.0, le=1.0)
    ap75: float = Field(..., ge=0.0, le=1.0)
    ap_s: float = Field(..., ge=0.0, le=1.0)
    per_threshold: List[ThresholdCurve] = Field(default_factory=list)
    n_images: int = 0
    n_gt: int = 0
    n_gt_small: int = 0
    n_detections: int = 0

    def summary(self) -> Dict[str, float]:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "ap_s": self.ap_s}


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(dets: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            out[i, j] = iou(d, g)
    return out


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Descending by score, equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")


def match_greedy(
    dets: Sequence[Detection],
    gts: Sequence[BBox],
    thresh: float,
    gt_ignore: Optional[Sequence[bool]] = None,
) -> MatchResult:
    """
    Each detection, in score order, takes the highest-IoU unmatched GT with
    IoU >= thresh (lowest GT index on ties). Non-ignored GTs are preferred;
    a detection that can only match an ignored GT is flagged IGNORED.
    """
    ignore = np.zeros(len(gts), dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    order = score_order([d.score for d in dets])
    ious = iou_matrix([dets[i].bbox for i in order], gts)
    matched = np.zeros(len(gts), dtype=bool)
    result = MatchResult()

    for row, det_idx in enumerate(order):
        best, best_iou = None, -1.0
        for want_ignored in (False, True):
            for j in range(len(gts)):
                if matched[j] or ignore[j] != want_ignored:
                    continue
                if ious[row, j] >= thresh and ious[row, j] > best_iou:
                    best, best_iou = j, ious[row, j]
            if best is not None:
                break
        result.scores.append(float(dets[det_idx].score))
        result.gt_index.append(best)
        if best is None:
            result.flags.append(MatchFlag.FP)
        else:
            matched[best] = True
            result.flags.append(MatchFlag.IGNORED if ignore[best] else MatchFlag.TP)

    result.n_unmatched_gt = int((~matched & ~ignore).sum())
    return result


def match_exhaustive(dets: Sequence[Detection], gts: Sequence[BBox], thresh: float) -> MatchResult:
    """
    Brute-force reference for match_greedy: searches every injective partial
    assignment of detections to GTs (pairs below thresh excluded) and keeps
    the lexicographically best one, detections taken in score order, each
    preferring a match over none, then higher IoU, then the lower GT index.
    """
    order = score_order([d.score for d in dets])
    ious = iou_matrix([dets[i].bbox for i in order], gts)
    n = len(order)
    best_key: Optional[Tuple] = None
    best_assign: List[Optional[int]] = []

    def search(row: int, used: frozenset, key: Tuple, assign: List[Optional[int]]) -> None:
        nonlocal best_key, best_assign
        if row == n:
            if best_key is None or key > best_key:
                best_key, best_assign = key, list(assign)
            return
        search(row + 1, used, key + ((0, 0.0, 0),), assign + [None])
        for j in range(len(gts)):
            if j not in used and ious[row, j] >= thresh:
                search(row + 1, used | {j}, key + ((1, ious[row, j], -j),), assign + [j])

    search(0, frozenset(), (), [])
    result = MatchResult(
        scores=[float(dets[i].score) for i in order],
        flags=[MatchFlag.FP if a is None else MatchFlag.TP for a in best_assign],
        gt_index=best_assign,
    )
    result.n_unmatched_gt = len(gts) - sum(a is not None for a in best_assign)
    return result


def precision_recall(
    flags: Sequence[MatchFlag],
    n_gt: int,
    scores: Optional[Sequence[float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raw precision / recall along the ranked list. flags are taken in the given
    order unless scores are passed, in which case they are ranked first.
    IGNORED entries are dropped.
    """
    flags = list(flags)
    if scores is not None:
        flags = [flags[i] for i in score_order(scores)]
    kept = np.array([f for f in flags if f != MatchFlag.IGNORED], dtype=object)
    tp = np.cumsum(kept == MatchFlag.TP).astype(np.float64)
    fp = np.cumsum(kept == MatchFlag.FP).astype(np.float64)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def interpolated_precision(precision: np.ndarray, recall: np.ndarray) -> np.ndarray:
    """Max precision at recall >= r for every r of the 101-point grid (0 past the curve)."""
    if len(precision) == 0:
        return np.zeros_like(RECALL_GRID)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    out = np.zeros_like(RECALL_GRID)
    valid = idx < len(envelope)
    out[valid] = envelope[idx[valid]]
    return out


def average_precision(
    flags: Sequence[MatchFlag],
    n_gt: int,
    scores: Optional[Sequence[float]] = None,
) -> float:
    if n_gt <= 0:
        return 0.0
    precision, recall = precision_recall(flags, n_gt, scores)
    return float(interpolated_precision(precision, recall).mean())


def _collect(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, Sequence[BBox]],
    image_ids: Sequence[int],
    thresh: float,
    small_only: bool,
) -> Tuple[List[float], List[MatchFlag]]:
    scores: List[float] = []
    flags: List[MatchFlag] = []
    for image_id in image_ids:
        gts = gts_by_image.get(image_id, [])
        ignore = [g.area >= SMALL_AREA for g in gts] if small_only else None
        res = match_greedy(dets_by_image.get(image_id, []), gts, thresh, gt_ignore=ignore)
        scores.extend(res.scores)
        flags.extend(res.flags)
    return scores, flags


def coco_suite(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, Sequence[BBox]],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> APReport:
    """
    Images are visited in ascending id order; detections with equal scores
    across images therefore rank by image id, then by their position.
    """
    image_ids = sorted(set(dets_by_image) | set(gts_by_image))
    n_gt = sum(len(gts_by_image.get(i, [])) for i in image_ids)
    n_small = sum(1 for i in image_ids for g in gts_by_image.get(i, []) if g.area < SMALL_AREA)

    curves = []
    for t in thresholds:
        scores, flags = _collect(dets_by_image, gts_by_image, image_ids, t, small_only=False)
        precision, recall = precision_recall(flags, n_gt, scores)
        interp = interpolated_precision(precision, recall)
        ap_t = float(interp.mean()) if n_gt else 0.0

        s_scores, s_flags = _collect(dets_by_image, gts_by_image, image_ids, t, small_only=True)
        ap_s_t = average_precision(s_flags, n_small, s_scores)
        curves.append(ThresholdCurve(
            iou_thresh=float(t), ap=ap_t, ap_s=ap_s_t,
            recall=RECALL_GRID.tolist(), precision=(interp if n_gt else np.zeros_like(interp)).tolist(),
        ))

    def at(t: float) -> float:
        for c in curves:
            if abs(c.iou_thresh - t) < 1e-9:
                return c.ap
        scores, flags = _collect(dets_by_image, gts_by_image, image_ids, t, small_only=False)
        return average_precision(flags, n_gt, scores)

    return APReport(
        ap=float(np.mean([c.ap for c in curves])) if curves else 0.0,
        ap50=at(0.5),
        ap75=at(0.75),
        ap_s=float(np.mean([c.ap_s for c in curves])) if curves else 0.0,
        per_threshold=curves,
        n_images=len(image_ids),
        n_gt=n_gt,
        n_gt_small=n_small,
        n_detections=sum(len(dets_by_image.get(i, [])) for i in image_ids),
    )


def write_report(report: APReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2) + "\n")
    return path


def write_pr_csv(report: APReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iou_thresh", "recall", "precision"])
        for curve in report.per_threshold:
            for r, p in zip(curve.recall, curve.precision):
                writer.writerow([f"{curve.iou_thresh:.2f}", f"{r:.2f}", repr(float(p))])
    return path


def write_detections_jsonl(dets_by_image: Mapping[int, Sequence[Detection]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for image_id in sorted(dets_by_image):
            for det in dets_by_image[image_id]:
                f.write(json.dumps(det.to_json(image_id)) + "\n")
    return path


def read_detections_jsonl(path: Union[str, Path]) -> Dict[int, List[Detection]]:
    out: Dict[int, List[Detection]] = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                det = Detection(BBox(row["x1"], row["y1"], row["x2"], row["y2"]), float(row["score"]))
                out.setdefault(int(row["image_id"]), []).append(det)
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{line_no}: malformed detection line: {e}") from e
    return out
