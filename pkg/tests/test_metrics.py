import itertools
import math

import numpy as np
import pytest

from mvinst.metrics import (
    ApResult,
    InstanceRecord,
    STRICT_THRESHOLDS,
    attention_entropy,
    average_precision,
    depth_metrics,
    iou_3d,
    map_suite,
)


def oracle_average_precision(preds, gts, threshold):
    """Independent transliteration: explicit greedy matching, explicit PR
    points, right-interpolation by max-over-suffix, rectangle summation."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = set()
    outcomes = []
    for i in order:
        candidates = []
        for k in range(len(gts)):
            if k in taken:
                continue
            inter = len(set(preds[i].points) & set(gts[k].points))
            union = len(set(preds[i].points) | set(gts[k].points))
            iou = inter / union if union else 0.0
            candidates.append((iou, -k))
        if candidates:
            best_iou, neg_k = max(candidates)
            if best_iou >= threshold:
                taken.add(-neg_k)
                outcomes.append(True)
                continue
        outcomes.append(False)
    points = []
    tp = fp = 0
    for hit in outcomes:
        tp, fp = tp + hit, fp + (not hit)
        points.append((tp / len(gts), tp / (tp + fp)))
    ap = 0.0
    prev_r = 0.0
    for idx, (r, _) in enumerate(points):
        if r > prev_r:
            best_later = max(p for rr, p in points[idx:])
            ap += (r - prev_r) * best_later
            prev_r = r
    return ap


class TestIou:
    def test_identical(self):
        assert iou_3d({1, 2, 3}, {1, 2, 3}) == 1.0

    def test_disjoint(self):
        assert iou_3d({1, 2}, {3, 4}) == 0.0

    def test_hand_count(self):
        assert iou_3d({1, 2, 3}, {2, 3, 4}) == 0.5

    def test_empty_union(self):
        assert iou_3d(set(), set()) == 0.0


class TestAveragePrecision:
    def test_single_perfect_prediction(self):
        gt = [InstanceRecord(frozenset({1, 2, 3}), 0)]
        pred = [InstanceRecord(frozenset({1, 2, 3}), 0, score=0.9)]
        for t in STRICT_THRESHOLDS + (0.25,):
            ap, _, _ = average_precision(pred, gt, t)
            assert ap == 1.0

    def test_no_predictions(self):
        gt = [InstanceRecord(frozenset({1}), 0)]
        ap, _, _ = average_precision([], gt, 0.5)
        assert ap == 0.0

    def test_spec_two_gt_curve(self):
        # perfect copy of gt1 at 0.9, half-overlap of gt2 at 0.8
        gt1 = InstanceRecord(frozenset({1, 2, 3, 4}), 0)
        gt2 = InstanceRecord(frozenset({10, 11}), 0)
        preds = [
            InstanceRecord(gt1.points, 0, score=0.9),
            InstanceRecord(frozenset({10}), 0, score=0.8),  # IoU exactly 0.5
        ]
        ap50, _, _ = average_precision(preds, [gt1, gt2], 0.5)
        assert ap50 == 1.0
        ap75, _, _ = average_precision(preds, [gt1, gt2], 0.75)
        assert ap75 == 0.5

    def test_matches_oracle_on_random_cases(self):
        rng = np.random.default_rng(0)
        universe = list(range(12))
        for trial in range(120):
            n_gt = int(rng.integers(1, 4))
            n_pred = int(rng.integers(0, 4))
            gts, used = [], set()
            for _ in range(n_gt):
                size = int(rng.integers(1, 5))
                pts = frozenset(rng.choice(universe, size=size, replace=False).tolist())
                gts.append(InstanceRecord(pts, 0))
            preds = []
            for _ in range(n_pred):
                size = int(rng.integers(1, 5))
                pts = frozenset(rng.choice(universe, size=size, replace=False).tolist())
                preds.append(InstanceRecord(pts, 0, score=float(rng.uniform())))
            for t in (0.25, 0.5, 0.75):
                ap, _, _ = average_precision(preds, gts, t)
                assert abs(ap - oracle_average_precision(preds, gts, t)) < 1e-12

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        for trial in range(30):
            gts = [
                InstanceRecord(frozenset(rng.choice(20, size=5, replace=False).tolist()), 0)
                for _ in range(3)
            ]
            preds = [
                InstanceRecord(
                    frozenset(rng.choice(20, size=5, replace=False).tolist()), 0, float(rng.uniform())
                )
                for _ in range(4)
            ]
            aps = [average_precision(preds, gts, t)[0] for t in STRICT_THRESHOLDS]
            assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


class TestMapSuite:
    def test_perfect_predictions(self):
        gts = [
            InstanceRecord(frozenset({0, 1}), 0),
            InstanceRecord(frozenset({2, 3}), 1),
        ]
        preds = [InstanceRecord(g.points, g.class_index, 0.9) for g in gts]
        res = map_suite(preds, gts)
        assert res.map_all == 1.0 and res.map_50 == 1.0 and res.map_25 == 1.0

    def test_empty_predictions(self):
        gts = [InstanceRecord(frozenset({0, 1}), 0)]
        res = map_suite([], gts)
        assert res.map_all == 0.0 and res.map_50 == 0.0 and res.map_25 == 0.0

    def test_spec_example_aggregates(self):
        gt1 = InstanceRecord(frozenset({1, 2, 3, 4}), 0)
        gt2 = InstanceRecord(frozenset({10, 11}), 0)
        preds = [
            InstanceRecord(gt1.points, 0, 0.9),
            InstanceRecord(frozenset({10}), 0, 0.8),
        ]
        res = map_suite(preds, [gt1, gt2])
        assert res.map_50 == 1.0
        # thresholds 0.50 match both; 0.55..0.95 only the first: AP 0.5 each
        expected = np.mean([1.0] + [0.5] * 9)
        assert abs(res.map_all - expected) < 1e-12
        assert res.map_25 == 1.0

    def test_order_map_le_map50_le_map25(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            gts = [
                InstanceRecord(
                    frozenset(rng.choice(30, size=6, replace=False).tolist()), int(rng.integers(2))
                )
                for _ in range(3)
            ]
            preds = [
                InstanceRecord(
                    frozenset(rng.choice(30, size=6, replace=False).tolist()),
                    int(rng.integers(2)),
                    float(rng.uniform()),
                )
                for _ in range(4)
            ]
            res = map_suite(preds, gts)
            assert res.map_all <= res.map_50 + 1e-12
            assert res.map_50 <= res.map_25 + 1e-12

    def test_class_agnostic_collapses(self):
        gts = [
            InstanceRecord(frozenset({0, 1}), 0),
            InstanceRecord(frozenset({2, 3}), 1),
        ]
        preds = [
            InstanceRecord(frozenset({0, 1}), 1, 0.9),  # wrong class
            InstanceRecord(frozenset({2, 3}), 0, 0.8),
        ]
        strict = map_suite(preds, gts)
        agn = map_suite(preds, gts, class_agnostic=True)
        assert strict.map_50 == 0.0
        assert agn.map_50 == 1.0


class TestDepthMetrics:
    def test_exact_prediction(self):
        gt = np.random.default_rng(3).uniform(1, 9, size=(2, 4, 4))
        assert depth_metrics(gt.copy(), gt) == (0.0, 1.0)

    def test_scale_invariance_by_construction(self):
        gt = np.random.default_rng(4).uniform(1, 9, size=(2, 4, 4))
        abs_rel, delta = depth_metrics(gt / 3.0, gt)
        assert abs_rel < 1e-15
        assert delta == 1.0

    def test_power_of_two_scales_exact(self):
        gt = np.random.default_rng(5).uniform(0.5, 20, size=(3, 8, 8))
        for k in (-7, -1, 1, 4, 9):
            assert depth_metrics((2.0**k) * gt, gt) == (0.0, 1.0)

    def test_one_bad_pixel_hand_formula(self):
        gt = np.full(100, 2.0)
        pred = gt.copy()
        pred[0] = 4.0  # predicted double depth at one pixel
        scale = np.median(gt / pred)  # 1.0 (99 of 100 ratios are 1)
        expected = np.mean(np.abs(scale * pred - gt) / gt)
        abs_rel, delta = depth_metrics(pred[None], gt[None])
        assert abs(abs_rel - expected) < 1e-15
        assert delta == 0.99

    def test_invalid_pixels_skipped(self):
        gt = np.full((1, 4, 4), -1.0)
        gt[0, 0, 0] = 5.0
        pred = np.full((1, 4, 4), 123.0)
        pred[0, 0, 0] = 5.0
        assert depth_metrics(pred, gt) == (0.0, 1.0)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            depth_metrics(np.ones((1, 2, 2)), np.full((1, 2, 2), -1.0))
        bad_gt = np.full((1, 2, 2), 0.0)
        with pytest.raises(ValueError):
            depth_metrics(np.ones((1, 2, 2)), bad_gt)


class TestAttentionEntropy:
    def test_one_hot(self):
        assert attention_entropy([0.0, 1.0, 0.0]) == 0.0

    def test_uniform(self):
        for n in (2, 5, 17):
            assert abs(attention_entropy(np.full(n, 1.0 / n)) - math.log(n)) < 1e-12

    def test_derived_value(self):
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        got = attention_entropy([0.75, 0.25])
        assert abs(got - expected) < 1e-15
        assert abs(got - 0.562335) < 1e-6

    def test_range(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            p = rng.dirichlet(np.ones(n))
            h = attention_entropy(p)
            assert -1e-12 <= h <= math.log(n) + 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            attention_entropy([0.7, 0.7])
        with pytest.raises(ValueError):
            attention_entropy([-0.1, 1.1])
