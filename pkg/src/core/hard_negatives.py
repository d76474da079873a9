"""
Hard-negative mining and the batch sampler that feeds mined images back into
training at a fixed per-batch rate.
"""
import math
from typing import Iterator, List, Mapping, Optional, Protocol, Sequence

import numpy as np

from src.core.head import BBox, Detection
from src.core.metrics import iou
from src.core.synth_data import DatasetManifest, HardNegative
from src.core.tensor import UsageError
from src.utils.logging import logger


class SupportsDetect(Protocol):
    def detect(self, image: np.ndarray, k: int = ..., score_thresh: float = ...) -> List[Detection]:
        ...


def false_positives(
    detections: Sequence[Detection],
    gts: Sequence[BBox],
    score_thresh: float = 0.3,
    iou_thresh: float = 0.3,
) -> List[Detection]:
    """Detections at or above score_thresh overlapping every GT by less than iou_thresh."""
    return [
        det for det in detections
        if det.score >= score_thresh and all(iou(det.bbox, gt) < iou_thresh for gt in gts)
    ]


def mine_hard_negatives(
    detector: Optional[SupportsDetect],
    manifest: DatasetManifest,
    images: Mapping[int, np.ndarray],
    score_thresh: float = 0.3,
    iou_thresh: float = 0.3,
    top_k: int = 100,
) -> DatasetManifest:
    """
    Run the detector over every manifest image and return a copy of the
    manifest whose hard_negatives are the confident false positives, sorted by
    (image id, score descending, box) so the result does not depend on the
    order images are visited in.
    """
    if detector is None:
        raise UsageError("hard-negative mining needs a trained checkpoint")

    gts_by_image = manifest.boxes_by_image()
    mined: List[HardNegative] = []
    for record in manifest.images:
        if record.id not in images:
            raise UsageError(f"no pixels loaded for image {record.id}")
        detections = detector.detect(images[record.id], k=top_k, score_thresh=score_thresh)
        for det in false_positives(detections, gts_by_image.get(record.id, []), score_thresh, iou_thresh):
            mined.append(HardNegative(image_id=record.id, bbox=det.bbox.as_list(), score=det.score))

    mined.sort(key=lambda h: (h.image_id, -h.score, *h.bbox))
    n_images = len({h.image_id for h in mined})
    logger.info(f"Mined {len(mined)} hard negatives across {n_images} of {len(manifest.images)} images")
    return manifest.model_copy(update={"hard_negatives": mined})


def pool_draws(rate: float, batch_size: int, rng: Optional[np.random.Generator] = None) -> int:
    """
    Pool ids for one batch: floor(rate * batch_size), plus one more with
    probability equal to the fractional part, so the expected share is the rate.
    """
    # round() keeps 0.3 * 10 from landing just under 3
    expected = round(rate * batch_size, 9)
    n = math.floor(expected)
    fraction = expected - n
    if fraction > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        n += int(rng.random() < fraction)
    return min(batch_size, n)


def hard_negative_sampler(
    manifest: DatasetManifest,
    batch_size: int,
    rate: float = 0.3,
    rng: Optional[np.random.Generator] = None,
    n_batches: Optional[int] = None,
) -> Iterator[List[int]]:
    """
    Yields batches of image ids. With a non-empty pool and rate > 0 every batch
    holds pool_draws(rate, batch_size) ids drawn with replacement from the images
    carrying hard negatives, the rest cycling through a shuffled pass over the
    remaining images. With rate 0 or an empty pool this is a plain shuffled
    pass (last batch may be short).
    """
    if not 0.0 <= rate <= 1.0:
        raise UsageError(f"hard-negative rate must lie in [0, 1], got {rate}")
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    all_ids = np.array([img.id for img in manifest.images], dtype=np.int64)
    if len(all_ids) == 0:
        return
    pool = np.array(sorted({h.image_id for h in manifest.hard_negatives}), dtype=np.int64)
    n_batches = n_batches if n_batches is not None else math.ceil(len(all_ids) / batch_size)

    if rate == 0.0 or len(pool) == 0:
        emitted = 0
        while emitted < n_batches:
            order = rng.permutation(all_ids)
            for start in range(0, len(order), batch_size):
                if emitted == n_batches:
                    return
                yield order[start:start + batch_size].tolist()
                emitted += 1
        return

    rest = np.setdiff1d(all_ids, pool)
    if len(rest) == 0:
        rest = all_ids
    order, cursor = rng.permutation(rest), 0
    for _ in range(n_batches):
        batch = rng.choice(pool, size=pool_draws(rate, batch_size, rng), replace=True).tolist()
        while len(batch) < batch_size:
            if cursor == len(order):
                order, cursor = rng.permutation(rest), 0
            batch.append(int(order[cursor]))
            cursor += 1
        yield batch


def count_false_positives(
    detector: SupportsDetect,
    images: Mapping[int, np.ndarray],
    gts_by_image: Optional[Mapping[int, Sequence[BBox]]] = None,
    score_thresh: float = 0.3,
    iou_thresh: float = 0.3,
    top_k: int = 100,
) -> int:
    gts_by_image = gts_by_image or {}
    total = 0
    for image_id in sorted(images):
        detections = detector.detect(images[image_id], k=top_k, score_thresh=score_thresh)
        total += len(false_positives(detections, gts_by_image.get(image_id, []), score_thresh, iou_thresh))
    return total
