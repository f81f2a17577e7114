import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ann, box, random_box
from dietlens.metrics import (
    COCO_THRESHOLDS,
    EvalReport,
    Prediction,
    average_precision,
    build_report,
    error_percentage,
    evaluate_detections,
    iou,
    mae,
    match_detections,
    mean_average_precision,
    occasion_totals,
    precision_recall,
)
from oracles import exact_ap, exact_ep, exact_mae, greedy_match, grid_iou

CATS = ("rice", "steak", "apple")


def random_scene(rng, n_max=10, size=24):
    n_gt = int(rng.integers(0, n_max + 1))
    n_pred = int(rng.integers(0, n_max + 1))
    gts = [ann(*random_box(rng, size).to_list(), category=CATS[rng.integers(3)]) for _ in range(n_gt)]
    # scores on a coarse grid so ties actually occur
    preds = [
        Prediction(random_box(rng, size), CATS[rng.integers(3)], float(rng.integers(0, 5)) / 4)
        for _ in range(n_pred)
    ]
    return preds, gts


# ---------------------------------------------------------------------- iou


def test_iou_examples():
    assert iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0
    assert iou(box(0, 0, 10, 10), box(10, 0, 20, 10)) == 0.0  # touching edges
    assert iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_iou_matches_pixel_count():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == float(grid_iou(a, b))


@given(
    st.tuples(*[st.floats(0, 50, allow_nan=False)] * 4),
    st.tuples(*[st.floats(0, 50, allow_nan=False)] * 4),
)
def test_iou_symmetric_and_bounded(p, q):
    if not (p[0] < p[2] and p[1] < p[3] and q[0] < q[2] and q[1] < q[3]):
        return
    a, b = box(*p), box(*q)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == iou(b, a)


# ---------------------------------------------------------------------- matching


def test_match_prefers_higher_score_then_highest_iou():
    gts = [ann(0, 0, 10, 10), ann(2, 0, 12, 10)]
    preds = [
        Prediction(box(1, 0, 11, 10), "rice", 0.9),  # IoU 9/11 with both; tie -> gt 0
        Prediction(box(2, 0, 12, 10), "rice", 0.8),
    ]
    m = match_detections(preds, gts, 0.5)
    assert [e.gt_index for e in m.entries["rice"]] == [0, 1]
    assert m.counts() == (2, 0, 0)


def test_match_strict_threshold_and_category():
    gts = [ann(0, 0, 10, 10)]
    half = Prediction(box(0, 0, 10, 5), "rice", 1.0)  # IoU exactly 0.5
    assert match_detections([half], gts, 0.5).counts() == (0, 1, 1)
    wrong_cat = Prediction(box(0, 0, 10, 10), "steak", 1.0)
    assert match_detections([wrong_cat], gts, 0.5).counts() == (0, 1, 1)


def test_match_duplicate_is_false_positive():
    gts = [ann(0, 0, 10, 10)]
    preds = [Prediction(box(0, 0, 10, 10), "rice", 0.9), Prediction(box(0, 0, 10, 10), "rice", 0.7)]
    m = match_detections(preds, gts, 0.5)
    assert [e.is_tp for e in m.entries["rice"]] == [True, False]
    assert precision_recall(m) == (0.5, 1.0)


def test_match_rejects_bad_threshold():
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)


def test_match_agrees_with_oracle():
    rng = np.random.default_rng(1)
    for _ in range(300):
        preds, gts = random_scene(rng)
        thr = COCO_THRESHOLDS[rng.integers(10)]
        m = match_detections(preds, gts, thr)
        got = {id(e.prediction): e.gt_index for ents in m.entries.values() for e in ents}
        want = greedy_match(preds, gts, thr)
        assert [got[id(p)] for p in preds] == want


# ---------------------------------------------------------------------- AP


def test_ap_examples():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([True, False, True], 2) == pytest.approx(1 / 2 + 1 / 2 * 2 / 3)
    assert average_precision([True], 4) == 0.25
    assert average_precision([], 3) == 0.0
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0


def test_ap_agrees_with_exact_fraction_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(0, 11))
        flags = list(rng.random(n) < 0.5)
        n_gt = int(sum(flags) + rng.integers(0, 3)) or 1
        assert abs(average_precision(flags, n_gt) - float(exact_ap(flags, n_gt))) <= 1e-12


@given(st.lists(st.booleans(), max_size=12), st.integers(0, 4))
def test_ap_in_unit_interval(flags, extra):
    n_gt = sum(flags) + extra
    ap = average_precision(flags, n_gt)
    if n_gt == 0:
        assert ap is None if not flags else ap == 0.0
    else:
        assert 0.0 <= ap <= 1.0


def test_ap_invariant_to_score_rescaling():
    rng = np.random.default_rng(3)
    for _ in range(50):
        preds, gts = random_scene(rng)
        base = evaluate_detections([(preds, gts)], 0.5)
        scaled = [Prediction(p.bbox, p.category, p.score * 0.5 + 0.1) for p in preds]
        assert evaluate_detections([(scaled, gts)], 0.5) == base


def test_map_sweep_has_ten_thresholds_and_exact_mean():
    assert COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
    rng = np.random.default_rng(4)
    images = [random_scene(rng) for _ in range(6)]
    images[0] = (images[0][0], [ann(0, 0, 5, 5)])
    per_t, averaged, per_cat = mean_average_precision(images)
    assert list(per_t) == list(COCO_THRESHOLDS)
    assert averaged == float(np.mean([per_t[t] for t in COCO_THRESHOLDS]))
    for t in COCO_THRESHOLDS:
        assert per_t[t] == float(np.mean(list(per_cat[t].values())))


def test_map_perfect_predictions():
    gts = [ann(0, 0, 10, 10, "rice"), ann(20, 20, 30, 30, "steak")]
    preds = [Prediction(g.bbox, g.category, 0.9) for g in gts]
    per_t, averaged, _ = mean_average_precision([(preds, gts)])
    assert averaged == 1.0 and all(v == 1.0 for v in per_t.values())


def test_map_errors():
    with pytest.raises(ValueError):
        mean_average_precision([])
    with pytest.raises(ValueError):
        mean_average_precision([([], [])])


def test_class_agnostic_ignores_labels():
    gts = [ann(0, 0, 10, 10, "rice")]
    preds = [Prediction(box(0, 0, 10, 10), "steak", 0.9)]
    assert evaluate_detections([(preds, gts)], 0.5) == {"rice": 0.0, "steak": 0.0}
    assert evaluate_detections([(preds, gts)], 0.5, class_agnostic=True) == {"food": 1.0}


# ---------------------------------------------------------------------- MAE / EP


def test_mae_and_ep_examples():
    assert mae([110, 90], [100, 100]) == 10.0
    assert error_percentage([110, 90], [100, 100]) == 10.0
    assert error_percentage([300], [200]) == 50.0
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        mae([1], [1, 2])
    with pytest.raises(ValueError):
        error_percentage([1], [0])


def test_mae_ep_agree_with_exact_oracle():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        # quarter-kcal values are exact in binary floating point
        preds = list(rng.integers(0, 4000, n) / 4)
        gts = list(rng.integers(1, 4000, n) / 4)
        assert mae(preds, gts) == float(exact_mae(preds, gts))
        assert math.isclose(error_percentage(preds, gts), float(exact_ep(preds, gts)), rel_tol=1e-15)


@given(st.lists(st.tuples(st.floats(0, 1e4), st.floats(0.1, 1e4)), min_size=1, max_size=10))
def test_mae_nonnegative_and_zero_iff_equal(pairs):
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    assert mae(preds, gts) >= 0
    assert mae(gts, gts) == 0
    assert error_percentage(gts, gts) == 0


def test_occasion_totals_groups_in_order():
    out = occasion_totals([("b", 1.0, 2.0), ("a", 3.0, 4.0), ("b", 5.0, 6.0)])
    assert out == [("b", 6.0, 8.0), ("a", 3.0, 4.0)]


# ---------------------------------------------------------------------- report


def test_report_round_trip_and_table():
    gts = [ann(0, 0, 10, 10, "rice", 100.0)]
    preds = [Prediction(box(0, 0, 10, 10), "rice", 0.8)]
    report = build_report([(preds, gts)], [(90.0, 100.0)], [("img", 90.0, 100.0)], extra={"k": 1})
    doc = report.to_json()
    assert report.map_50_95 == 1.0
    assert report.mae == 10.0 and report.error_percentage == 10.0
    assert isinstance(report, EvalReport)
    assert report.dumps() == report.dumps()
    assert "MAE (per item): 10.00 kcal" in report.text_table()
    assert doc["extra"] == {"k": 1}


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_fraction_oracle_self_check(seed):
    # the AP oracle itself: one TP at rank 1 of n_gt gives exactly 1/n_gt
    n_gt = seed % 7 + 1
    assert exact_ap([True], n_gt) == Fraction(1, n_gt)
