import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grcn.evaluation import (IOU_THRESHOLDS, DetectionRecord, GroundTruth, average_precision,
                             coco_metrics, match_detections)

from oracles import ap_reference

GOLDEN = Path(__file__).parent / "fixtures" / "golden_ap.json"


def load_golden():
    f = json.loads(GOLDEN.read_text())
    dets = [DetectionRecord(d["image_id"], tuple(d["box"]), d["class_id"], d["score"]) for d in f["detections"]]
    gts = [GroundTruth(g["image_id"], tuple(g["box"]), g["class_id"]) for g in f["ground_truth"]]
    expected = {}
    for k, v in f["expected"].items():
        num, _, den = v.partition("/")
        expected[k] = float(num) / float(den or 1)
    return dets, gts, f["num_classes"], expected


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([True, True], 2) == 1.0

    def test_no_ground_truth_is_undefined(self):
        assert average_precision([False], 0) is None

    def test_no_detections(self):
        assert average_precision([], 3) == 0.0

    def test_half_recall(self):
        # recall reaches 0.5 with precision 1 at points 0..50
        assert average_precision([True], 2) == pytest.approx(51 / 101)

    def test_voc11(self):
        assert average_precision([True, False, True], 2, "voc11") == pytest.approx((6 + 5 * 2 / 3) / 11)

    @settings(max_examples=60)
    @given(st.lists(st.booleans(), max_size=30), st.integers(1, 10))
    def test_matches_loop_reference(self, flags, extra):
        n_gt = sum(flags) + extra - 1 or 1
        assert average_precision(flags, n_gt) == pytest.approx(ap_reference(flags, n_gt), abs=1e-12)

    @given(st.lists(st.booleans(), min_size=1, max_size=30))
    def test_bounded(self, flags):
        ap = average_precision(flags, max(sum(flags), 1))
        assert 0.0 <= ap <= 1.0


class TestMatching:
    def test_higher_score_claims_gt_first(self):
        gts = [GroundTruth(0, (0, 0, 10, 10), 0)]
        dets = [DetectionRecord(0, (0, 0, 10, 9), 0, 0.2), DetectionRecord(0, (0, 0, 10, 10), 0, 0.9)]
        m = match_detections(dets, gts, 0.5)
        assert m.order.tolist() == [1, 0]
        assert m.tp.tolist() == [False, True]

    def test_class_and_image_must_agree(self):
        gts = [GroundTruth(0, (0, 0, 10, 10), 0)]
        dets = [DetectionRecord(1, (0, 0, 10, 10), 0, 0.9), DetectionRecord(0, (0, 0, 10, 10), 1, 0.8)]
        assert not match_detections(dets, gts, 0.5).tp.any()


class TestCocoMetrics:
    def test_golden_fixture(self):
        dets, gts, k, expected = load_golden()
        report = coco_metrics(dets, gts, k).to_dict()
        for key, value in expected.items():
            assert report[key] == pytest.approx(value, abs=1e-12), key

    def test_golden_fractions_are_consistent(self):
        # the headline value is the mean of the per-class values
        f = json.loads(GOLDEN.read_text())["expected"]
        assert Fraction(f["ap"]) == (Fraction(f["per_class.0"]) + Fraction(f["per_class.1"])) / 2

    def test_perfect_detections(self):
        rng = np.random.default_rng(0)
        gts, dets = [], []
        for img in range(4):
            for c in range(2):
                xy = rng.uniform(0, 50, 2)
                box = (*xy, *(xy + rng.uniform(5, 120, 2)))
                gts.append(GroundTruth(img, box, c))
                dets.append(DetectionRecord(img, box, c, float(rng.random())))
        r = coco_metrics(dets, gts, 2)
        assert r.ap == pytest.approx(1.0) and r.ap50 == pytest.approx(1.0)

    def test_empty_dataset_is_undefined(self):
        r = coco_metrics([], [], 3)
        assert r.ap is None and r.ap50 is None and r.ap_small is None
        assert "ap=undefined" in r.to_text()
        assert json.loads(r.to_json())["ap"] is None

    def test_class_without_gt_is_excluded_from_mean(self):
        gts = [GroundTruth(0, (0, 0, 10, 10), 0)]
        dets = [DetectionRecord(0, (0, 0, 10, 10), 0, 0.9), DetectionRecord(0, (0, 0, 5, 5), 1, 0.8)]
        r = coco_metrics(dets, gts, 2)
        assert r.per_class[1] is None
        assert r.ap == pytest.approx(1.0)

    def test_unknown_class_detections_are_counted(self):
        gts = [GroundTruth(0, (0, 0, 10, 10), 0)]
        dets = [DetectionRecord(0, (0, 0, 10, 10), 7, 0.9)]
        r = coco_metrics(dets, gts, 2)
        assert r.unknown_class_dets == 1
        assert r.ap == 0.0

    def test_thresholds(self):
        assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95 and len(IOU_THRESHOLDS) == 10

    def test_report_text_is_stable(self):
        dets, gts, k, _ = load_golden()
        a = coco_metrics(dets, gts, k)
        b = coco_metrics(list(reversed(dets)), gts, k)
        assert a.to_text() == b.to_text()
        assert a.to_text().splitlines()[0].startswith("ap=")
