import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from lgsa.metrics import (
    Detection,
    average_precision,
    count_metrics,
    decode,
    evaluate_detections,
    iou,
    local_peaks,
)
from lgsa.network import PredictionMaps
from lgsa.selftest import isolated_cells
from lgsa.targets import Annotation, Box, make_targets

from oracles import ap_reference, count_reference, isolated_annotation_boxes, random_ap_case


def maps(heat, size=None, offset=None):
    heat = np.asarray(heat, dtype=float)
    h, w = heat.shape[-2:]
    return PredictionMaps(
        heat.reshape(-1, h, w),
        np.ones((2, h, w)) if size is None else size,
        np.zeros((2, h, w)) if offset is None else offset,
    )


class TestDecode:
    def test_ground_truth_single_box(self):
        tm = make_targets(Annotation(16, 16, [Box(10, 7, 8, 6)]), 4)
        (d,) = decode(tm, 4)
        assert (d.cx, d.cy, d.w, d.h, d.score) == (10.0, 7.0, 8.0, 6.0, 1.0)

    def test_all_zero(self):
        assert decode(maps(np.zeros((8, 8))), 4) == []

    def test_two_isolated_peaks(self):
        heat = np.zeros((8, 8))
        heat[1, 1] = heat[5, 6] = 1.0
        dets = decode(maps(heat), 4)
        assert sorted((d.cx, d.cy) for d in dets) == [(4.0, 4.0), (24.0, 20.0)]

    def test_threshold_and_top_k(self):
        heat = np.zeros((8, 8))
        heat[0, 0], heat[3, 3], heat[6, 6] = 0.9, 0.5, 0.2
        assert len(decode(maps(heat), 4)) == 2
        dets = decode(maps(heat), 4, score_threshold=0.0, top_k=1)
        assert [d.score for d in dets] == [0.9]

    def test_plateau_yields_one_peak(self):
        heat = np.zeros((1, 5, 5))
        heat[0, 2, 1:4] = 0.7
        heat[0, 1:4, 2] = 0.7
        mask = local_peaks(heat) & (heat > 0)
        assert mask.sum() == 1
        assert mask[0, 1, 2]  # first plateau cell in raster order

    def test_tie_break_rule(self):
        heat = np.array([[[0.5, 0.5], [0.5, 0.5]]])
        assert_array_equal(local_peaks(heat)[0], [[True, False], [False, False]])

    def test_scores_sorted(self):
        rng = np.random.default_rng(0)
        dets = decode(maps(rng.uniform(0, 1, (16, 16))), 4, score_threshold=0.0)
        s = [d.score for d in dets]
        assert s == sorted(s, reverse=True)

    def test_mismatched_extents(self):
        with pytest.raises(ValueError):
            decode(PredictionMaps(np.zeros((1, 4, 4)), np.zeros((2, 3, 3)), np.zeros((2, 4, 4))), 4)


class TestRoundtrip:
    def test_isolated_annotations(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            boxes = isolated_annotation_boxes(rng, isolated_cells(rng, 16, int(rng.integers(0, 10))))
            tm = make_targets(Annotation(64, 64, boxes), 4, sigma_rule=lambda b, r: 0.2)
            got = sorted((d.cx, d.cy, d.w, d.h) for d in decode(tm, 4, score_threshold=0.5))
            assert got == sorted((b.cx, b.cy, b.w, b.h) for b in boxes)


class TestIoU:
    def test_examples(self):
        a = Box(2, 2, 4, 4)
        assert iou(a, a) == 1.0
        assert iou(a, Box(20, 20, 4, 4)) == 0.0
        assert iou(a, Box(4, 2, 4, 4)) == pytest.approx(1 / 3, abs=1e-15)

    def test_touching_edges(self):
        assert iou(Box(2, 2, 4, 4), Box(6, 2, 4, 4)) == 0.0


class TestCountMetrics:
    def test_examples(self):
        assert count_metrics([1, 2, 3], [1, 2, 3]) == (0.0, 0.0)
        mae, rmse = count_metrics([3, 5], [4, 5])
        assert mae == 0.5
        assert rmse == pytest.approx(0.70711, abs=1e-5)

    @pytest.mark.parametrize("pred,gt", [([], []), ([1, 2], [1])])
    def test_rejects_bad_lengths(self, pred, gt):
        with pytest.raises(ValueError):
            count_metrics(pred, gt)

    def test_matches_reference(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            p, g = rng.integers(0, 100, n), rng.integers(0, 100, n)
            got = count_metrics(p, g)
            ref = count_reference(p.tolist(), g.tolist())
            assert abs(got[0] - ref[0]) <= 1e-9 and abs(got[1] - ref[1]) <= 1e-9


class TestAveragePrecision:
    gt = [[Box(10, 10, 4, 4)]]

    def test_all_matched(self):
        dets = [Detection(10, 10, 4, 4, 0.9), Detection(30, 30, 4, 4, 0.8)]
        assert average_precision(dets, [[Box(10, 10, 4, 4), Box(30, 30, 4, 4)]]) == 1.0

    def test_true_positive_first(self):
        dets = [Detection(10, 10, 4, 4, 0.9), Detection(40, 40, 4, 4, 0.8)]
        assert average_precision(dets, self.gt) == 1.0

    def test_false_positive_first(self):
        dets = [Detection(40, 40, 4, 4, 0.9), Detection(10, 10, 4, 4, 0.8)]
        assert average_precision(dets, self.gt) == 0.5

    def test_no_detections(self):
        assert average_precision([], self.gt) == 0.0

    def test_no_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            average_precision([Detection(1, 1, 1, 1, 0.5)], [[]])

    def test_other_image_does_not_match(self):
        dets = [Detection(10, 10, 4, 4, 0.9, image_id=1)]
        assert average_precision(dets, {0: self.gt[0], 1: []}) == 0.0

    def test_class_must_agree(self):
        assert average_precision([Detection(10, 10, 4, 4, 0.9, class_id=1)], [[Box(10, 10, 4, 4, 0)]]) == 0.0

    def test_duplicate_detection_is_false_positive(self):
        dets = [Detection(10, 10, 4, 4, 0.9), Detection(10, 10, 4, 4, 0.8)]
        assert average_precision(dets, self.gt) == 1.0
        dets = [Detection(10, 10, 4, 4, 0.9), Detection(10, 10, 4, 4, 0.8), Detection(30, 30, 4, 4, 0.7)]
        assert average_precision(dets, [[Box(10, 10, 4, 4), Box(30, 30, 4, 4)]]) == pytest.approx(0.5 + 0.5 * 2 / 3)

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            dets, gts = random_ap_case(rng)
            assert abs(average_precision(dets, gts) - ap_reference(dets, gts)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["affine", "cube", "logit"]))
def test_ap_invariant_to_monotone_rescaling(seed, kind):
    rng = np.random.default_rng(seed)
    dets, gts = random_ap_case(rng)
    f = {"affine": lambda s: 0.3 * s + 0.1, "cube": lambda s: s**3, "logit": lambda s: math.log(s / (1 - s))}[kind]
    rescaled = [Detection(d.cx, d.cy, d.w, d.h, f(d.score), d.class_id, d.image_id) for d in dets]
    assert average_precision(rescaled, gts) == average_precision(dets, gts)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200)), min_size=1, max_size=40))
def test_rmse_at_least_mae(pairs):
    mae, rmse = count_metrics(*zip(*pairs))
    assert rmse >= mae - 1e-12 >= -1e-12


def test_evaluate_detections_report():
    gts = [[Box(10, 10, 4, 4)], [Box(10, 10, 4, 4), Box(30, 30, 4, 4)]]
    dets = [[Detection(10, 10, 4, 4, 0.9)], [Detection(30, 30, 4, 4, 0.8)]]
    rep = evaluate_detections(dets, gts)
    assert rep.pred_counts == [1, 1] and rep.gt_counts == [1, 2]
    assert rep.mae == 0.5
    assert rep.ap == pytest.approx(2 / 3)
    assert rep.to_dict()["num_images"] == 2
