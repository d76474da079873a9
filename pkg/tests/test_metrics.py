"""
Tests for IoU, matching and COCO-style average precision.
"""
import csv

import numpy as np
import pytest

from src.core.head import BBox, Detection
from src.core.metrics import (
    IOU_THRESHOLDS,
    RECALL_GRID,
    MatchFlag,
    average_precision,
    coco_suite,
    interpolated_precision,
    iou,
    match_exhaustive,
    match_greedy,
    precision_recall,
    read_detections_jsonl,
    write_detections_jsonl,
    write_pr_csv,
    write_report,
)

TP, FP, IGN = MatchFlag.TP, MatchFlag.FP, MatchFlag.IGNORED


def det(x1, y1, x2, y2, score):
    return Detection(BBox(x1, y1, x2, y2), score)


def random_instance(rng):
    n_gt = int(rng.integers(0, 5))
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 20, size=2)
        w, h = rng.uniform(3, 8, size=2)
        gts.append(BBox(x, y, x + w, y + h))
    dets = []
    for _ in range(int(rng.integers(0, 6))):
        if gts and rng.uniform() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            jitter = rng.normal(0, 1.0, size=4)
            box = BBox(g.x1 + jitter[0], g.y1 + jitter[1], g.x2 + abs(jitter[2]) + 0.5, g.y2 + abs(jitter[3]) + 0.5)
        else:
            x, y = rng.uniform(0, 20, size=2)
            box = BBox(x, y, x + rng.uniform(3, 8), y + rng.uniform(3, 8))
        # coarse scores produce ties
        dets.append(Detection(box, float(np.round(rng.uniform(), 1))))
    return dets, gts


class TestIoU:

    def test_partial_overlap(self):
        assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_identical_and_disjoint(self):
        box = BBox(2, 3, 7, 9)
        assert iou(box, box) == 1.0
        assert iou(box, BBox(7, 9, 10, 12)) == 0.0

    def test_symmetric(self):
        a, b = BBox(0, 0, 5, 4), BBox(2, 1, 6, 8)
        assert iou(a, b) == iou(b, a)


class TestMatching:

    def test_greedy_prefers_highest_iou(self):
        gts = [BBox(0, 0, 10, 10), BBox(1, 1, 11, 11)]
        res = match_greedy([det(1, 1, 11, 11, 0.9)], gts, 0.5)
        assert res.gt_index == [1]
        assert res.n_unmatched_gt == 1

    def test_greedy_score_order_and_ties(self):
        gt = [BBox(0, 0, 10, 10)]
        dets = [det(0, 0, 10, 10, 0.5), det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.5)]
        res = match_greedy(dets, gt, 0.5)
        assert res.scores == [0.9, 0.5, 0.5]
        assert res.flags == [TP, FP, FP]

    def test_below_threshold_is_false_positive(self):
        res = match_greedy([det(0, 0, 2, 2, 0.8)], [BBox(1, 1, 3, 3)], 0.5)
        assert res.flags == [FP]
        assert res.gt_index == [None]

    def test_ignored_gt_flags_detection(self):
        gts = [BBox(0, 0, 40, 40), BBox(50, 50, 58, 58)]
        res = match_greedy([det(0, 0, 40, 40, 0.9)], gts, 0.5, gt_ignore=[True, False])
        assert res.flags == [IGN]
        assert res.n_unmatched_gt == 1

    def test_non_ignored_gt_preferred(self):
        gts = [BBox(0, 0, 10, 10), BBox(0, 0, 10, 11)]
        res = match_greedy([det(0, 0, 10, 10, 0.9)], gts, 0.5, gt_ignore=[True, False])
        assert res.flags == [TP]
        assert res.gt_index == [1]

    def test_greedy_equals_exhaustive_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(500):
            dets, gts = random_instance(rng)
            thresh = float(rng.choice([0.3, 0.5, 0.7]))
            greedy = match_greedy(dets, gts, thresh)
            oracle = match_exhaustive(dets, gts, thresh)
            assert greedy.flags == oracle.flags
            assert greedy.gt_index == oracle.gt_index
            assert greedy.n_unmatched_gt == oracle.n_unmatched_gt


class TestAveragePrecision:

    def test_hand_computed_curve(self):
        assert average_precision([TP, FP, TP], n_gt=2) == pytest.approx(253 / 303, abs=1e-12)

    def test_perfect_and_empty(self):
        assert average_precision([TP, TP], n_gt=2) == pytest.approx(1.0)
        assert average_precision([], n_gt=3) == 0.0
        assert average_precision([TP], n_gt=0) == 0.0

    def test_scores_rank_flags(self):
        assert average_precision([TP, FP, TP], n_gt=2, scores=[0.9, 0.8, 0.7]) == pytest.approx(253 / 303)
        assert average_precision([FP, TP, TP], n_gt=2, scores=[0.1, 0.9, 0.8]) == pytest.approx(1.0)

    def test_ignored_entries_are_dropped(self):
        precision, recall = precision_recall([TP, IGN, FP], n_gt=1)
        np.testing.assert_allclose(precision, [1.0, 0.5])
        np.testing.assert_allclose(recall, [1.0, 1.0])

    def test_trailing_false_positive_does_not_change_ap(self):
        base = average_precision([TP, FP, TP], n_gt=3)
        assert average_precision([TP, FP, TP, FP, FP], n_gt=3) == pytest.approx(base)

    def test_leading_false_positive_lowers_ap(self):
        assert average_precision([FP, TP, TP], n_gt=2) < average_precision([TP, TP], n_gt=2)

    def test_interpolated_precision_is_monotone(self):
        rng = np.random.default_rng(1)
        flags = [TP if x else FP for x in rng.uniform(size=40) < 0.4]
        precision, recall = precision_recall(flags, n_gt=25)
        interp = interpolated_precision(precision, recall)
        assert interp.shape == RECALL_GRID.shape
        assert np.all(np.diff(interp) <= 1e-12)


class TestCocoSuite:

    def test_perfect_detections(self):
        gts = {0: [BBox(0, 0, 10, 10)], 1: [BBox(5, 5, 20, 12), BBox(30, 30, 70, 70)]}
        dets = {i: [Detection(b, 0.9) for b in boxes] for i, boxes in gts.items()}
        report = coco_suite(dets, gts)
        assert report.summary() == pytest.approx({"ap": 1.0, "ap50": 1.0, "ap75": 1.0, "ap_s": 1.0})
        assert report.n_images == 2
        assert report.n_gt == 3
        assert report.n_gt_small == 2
        assert len(report.per_threshold) == len(IOU_THRESHOLDS)

    def test_large_detections_do_not_hurt_ap_s(self):
        small, large = BBox(0, 0, 10, 10), BBox(50, 50, 90, 90)
        dets = {0: [Detection(large, 0.9), Detection(small, 0.8), det(100, 100, 110, 110, 0.7)]}
        report = coco_suite(dets, {0: [small, large]})
        # the large-box hit is ignored for AP_S rather than counted as a false positive
        assert report.ap_s == pytest.approx(1.0)
        assert report.ap == pytest.approx(1.0)

    def test_no_small_objects(self):
        report = coco_suite({0: [det(0, 0, 40, 40, 0.9)]}, {0: [BBox(0, 0, 40, 40)]})
        assert report.ap == pytest.approx(1.0)
        assert report.ap_s == 0.0

    def test_empty_dataset(self):
        report = coco_suite({}, {})
        assert report.summary() == {"ap": 0.0, "ap50": 0.0, "ap75": 0.0, "ap_s": 0.0}

    def test_loose_box_counts_at_50_not_75(self):
        gt = BBox(0, 0, 10, 10)
        # IoU = 100 / 150
        report = coco_suite({0: [det(0, 0, 15, 10, 0.9)]}, {0: [gt]})
        assert report.ap50 == pytest.approx(1.0)
        assert report.ap75 == 0.0
        assert 0.0 < report.ap < 1.0


class TestReportFiles:

    def test_report_and_curves(self, tmp_path):
        report = coco_suite({0: [det(0, 0, 10, 10, 0.9)]}, {0: [BBox(0, 0, 10, 10)]})
        path = write_report(report, tmp_path / "out" / "report.json")
        assert path.exists()
        assert '"ap50": 1.0' in path.read_text()

        csv_path = write_pr_csv(report, tmp_path / "pr.csv")
        with open(csv_path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iou_thresh", "recall", "precision"]
        assert len(rows) == 1 + len(IOU_THRESHOLDS) * len(RECALL_GRID)

    def test_detections_jsonl(self, tmp_path):
        dets = {3: [det(1, 2, 3, 4, 0.5)], 1: [det(0, 0, 8, 8, 0.25), det(4, 4, 9, 9, 0.75)]}
        path = write_detections_jsonl(dets, tmp_path / "dets.jsonl")
        lines = path.read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith('{"image_id": 1')
        assert read_detections_jsonl(path) == {1: dets[1], 3: dets[3]}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"image_id": 0, "x1": 0}\n')
        with pytest.raises(ValueError, match="bad.jsonl:1"):
            read_detections_jsonl(path)
