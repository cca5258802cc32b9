import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsecoop.geometry import BBox, Pose, bev_iou
from sparsecoop.metrics import (
    EvaluationError,
    MetricRow,
    all_point_ap,
    average_precision,
    iou_matrix,
    match_detections,
    pose_error,
    rows_to_csv,
)


def bar(x, score=1.0, y=0.0):
    # 2 x 1 boxes along x: IoU at offset d is (2 - d) / (2 + d)
    return BBox(x, y, 0.5, 2.0, 1.0, 1.0, 0.0, score)


def test_match_single_tp():
    d = bar(2 / 9)  # IoU (2 - 2/9) / (2 + 2/9) = 0.8
    assert math.isclose(bev_iou(d, bar(0)), 0.8)
    tp, m = match_detections([d], [bar(0)], 0.7)
    assert tp.tolist() == [True] and m.tolist() == [0]


def test_match_duplicate_is_fp():
    tp, _ = match_detections([bar(0, 0.9), bar(0.05, 0.8)], [bar(0)], 0.5)
    assert sorted(tp.tolist()) == [False, True]


def test_match_hand_traced_greedy():
    gts = [bar(0.0), bar(1.0)]
    dets = [bar(0.2, 0.8), bar(1.0, 0.7), bar(0.5, 0.9)]
    # d2 (0.9) ties 0.6/0.6 -> G0; d0 (0.8) G0 taken, G1 at 0.43 -> G1; d1 (0.7) G0 at 1/3 -> FP
    tp, m = match_detections(dets, gts, 0.4)
    assert tp.tolist() == [True, False, True]
    assert m.tolist() == [1, -1, 0]


def test_match_argument_checks():
    with pytest.raises(ValueError):
        match_detections([], [], 0.0)
    with pytest.raises(ValueError):
        match_detections([], [], 0.5, "2d")


def test_iou_matrix_prefilter_agrees_with_full(rng):
    dets = [BBox(*rng.uniform(-6, 6, 2), 0.5, 4, 2, 1, rng.uniform(-3, 3)) for _ in range(25)]
    gts = [BBox(*rng.uniform(-6, 6, 2), 0.5, 4, 2, 1, rng.uniform(-3, 3)) for _ in range(20)]
    full = np.array([[bev_iou(d, g) for g in gts] for d in dets])
    assert np.array_equal(iou_matrix(dets, gts), full)


def brute_ap(tp_sorted, n_gt):
    """Sum over each TP of 1/n_gt times the best precision at that recall or beyond."""
    tp_sorted = list(tp_sorted)
    prec = [sum(tp_sorted[: i + 1]) / (i + 1) for i in range(len(tp_sorted))]
    return sum(max(prec[i:]) / n_gt for i, t in enumerate(tp_sorted) if t)


def test_ap_trivial():
    frames = [([bar(0, 0.9), bar(5, 0.8)], [bar(0), bar(5)])]
    assert average_precision(frames, 0.5) == 1.0
    assert average_precision([([], [bar(0)])], 0.5) == 0.0


def test_ap_errors():
    with pytest.raises(EvaluationError):
        average_precision([], 0.5)
    with pytest.raises(EvaluationError):
        average_precision([([bar(0)], [])], 0.5)
    with pytest.raises(ValueError):
        average_precision([([bar(0)], [bar(0)])], 0.5, sorting="frame")


def test_global_and_local_sorting_differ():
    f1 = ([bar(0, 0.9), bar(20, 0.3)], [bar(0), bar(40)])
    f2 = ([bar(60, 0.8), bar(0, 0.6)], [bar(0)])
    g = average_precision([f1, f2], 0.5, "global")
    loc = average_precision([f1, f2], 0.5, "local")
    # global order: .9 T, .8 F, .6 T, .3 F ; local order: .9 T, .3 F, .8 F, .6 T
    assert math.isclose(g, brute_ap([1, 0, 1, 0], 3))
    assert math.isclose(loc, brute_ap([1, 0, 0, 1], 3))
    assert g != loc


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
def test_all_point_ap_matches_brute_force(flags, extra):
    n_gt = max(1, sum(flags) + extra)
    assert math.isclose(all_point_ap(np.array(flags, dtype=bool), n_gt), brute_ap(flags, n_gt), abs_tol=1e-12)


frame_st = st.lists(st.tuples(st.integers(-5, 5), st.floats(0.01, 1.0)), max_size=6)


@given(st.lists(st.tuples(frame_st, st.lists(st.integers(-5, 5), min_size=1, max_size=5, unique=True)), min_size=1, max_size=4))
def test_ap_properties(spec):
    frames = [([bar(3.0 * x, s) for x, s in dets], [bar(3.0 * x) for x in gts]) for dets, gts in spec]
    ap = average_precision(frames, 0.5, "global")
    assert 0.0 <= ap <= 1.0
    scaled = [([BBox(d.cx, d.cy, d.cz, d.l, d.w, d.h, d.yaw, d.score ** 2) for d in dets], g) for dets, g in frames]
    assert math.isclose(ap, average_precision(scaled, 0.5, "global"), abs_tol=1e-12)
    if len(frames) == 1:
        assert math.isclose(ap, average_precision(frames, 0.5, "local"), abs_tol=1e-12)


def test_pose_error_examples():
    t, r = pose_error(Pose(1, 2, 0, 0.3), Pose(1, 2, 0, 0.3))
    assert t < 1e-12 and r == 0.0
    t, r = pose_error(Pose(), Pose(1, 0, 0, 0))
    assert math.isclose(t, 1.0) and r == 0.0
    t, r = pose_error(Pose(), Pose(0.3, 0.4, 0, math.radians(2)))
    assert math.isclose(t, 0.5) and math.isclose(r, 2.0)


def test_pose_error_wraps():
    _, r = pose_error(Pose(0, 0, 0, math.pi - 0.01), Pose(0, 0, 0, -math.pi + 0.01))
    assert math.isclose(r, math.degrees(0.02), abs_tol=1e-9)


def test_rows_to_csv_format():
    row = MetricRow("e", "full", 0.2, 100.0, 0.7, "bev", "global", 0.5, float("nan"), 1.25, 3, 9)
    assert rows_to_csv([row]).splitlines()[1] == "e,full,0.2000,100.0,0.70,bev,global,0.500000,nan,1.250000,3,9"
