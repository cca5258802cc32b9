import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsecoop.geometry import Pose
from sparsecoop.spatial import (
    RotationError,
    adapt_rotation,
    knn_fuse,
    rotate_motion,
    round_half_up,
    self_only_fuse,
    snap_to_grid,
)
from sparsecoop.temporal import Query

W = 16


def rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def q(x, y, feat=None, score=1.0, t=0.0):
    return Query(np.zeros(W) if feat is None else feat, x, y, score, t)


def test_rotation_suffix_identity_and_shape():
    f = np.ones((3, W))
    out = adapt_rotation(f, np.eye(3))
    assert out.shape == f.shape
    assert np.array_equal(out[0, -9:], np.eye(3).reshape(-1))
    assert np.array_equal(out[:, :-9], f[:, :-9])


def test_rotation_suffix_yaw_90():
    out = adapt_rotation(np.zeros((1, W)), rot_z(math.pi / 2))
    expect = np.array([0, -1, 0, 1, 0, 0, 0, 0, 1], dtype=float)
    assert np.allclose(out[0, -9:], expect, atol=1e-15)


def test_rotation_errors():
    with pytest.raises(RotationError):
        adapt_rotation(np.zeros((1, W)), np.eye(2))
    with pytest.raises(RotationError):
        adapt_rotation(np.zeros((1, W)), 2 * np.eye(3))
    with pytest.raises(RotationError):
        adapt_rotation(np.zeros((1, 4)), np.eye(3))


def test_snap_examples():
    assert snap_to_grid([q(0.8, -1.6)], Pose())[0].xy.tolist() == [0.8, -1.6]
    assert snap_to_grid([q(0.3, 0.0)], Pose())[0].xy.tolist() == [0.0, 0.0]
    out = snap_to_grid([q(0.41, 0.79)], Pose())[0]
    assert math.isclose(out.x, 0.8) and math.isclose(out.y, 0.8)


def test_snap_applies_transform():
    out = snap_to_grid([q(1.0, 0.0)], Pose(10.0, 0.0, 0.0, math.pi / 2))[0]
    assert math.isclose(out.x, 10.4) and math.isclose(out.y, 0.8)


def test_round_half_up_ties():
    assert round_half_up(0.4, 0.8) == 0.8
    assert round_half_up(-0.4, 0.8) == 0.0


def test_rotate_motion_slots():
    f = np.zeros(W)
    f[0] = 2.0
    out = rotate_motion([q(0, 0, f)], math.pi / 2)[0]
    assert np.allclose(out.feature[:2], [0.0, 2.0], atol=1e-15)
    assert np.array_equal(out.feature[2:], f[2:])


def test_fuse_empty_coop_identity():
    ego = [q(0, 0, np.arange(W, dtype=float)), q(5, 5, np.ones(W))]
    assert knn_fuse(ego, []) == ego
    with pytest.raises(ValueError):
        knn_fuse([], [])


def test_fuse_colocated_pair():
    f1 = np.linspace(0, 1, W)
    f2 = np.linspace(1, -1, W)
    out = knn_fuse([q(0, 0, f1, 0.9)], [q(0, 0, f2, 0.5)], k=2)
    assert len(out) == 1
    assert np.allclose(out[0].feature, (np.maximum(f1, f2) + (f1 + f2) / 2) / 2)
    assert out[0].score == 0.9


def test_fuse_isolated_coop_query_keeps_feature():
    f = np.full(W, 3.0)
    out = knn_fuse([q(0, 0)], [q(100, 0, f)], k=1)
    iso = [o for o in out if o.x == 100]
    assert len(iso) == 1 and np.allclose(iso[0].feature, f)


def test_self_only_fuse_keeps_own_features():
    f1, f2 = np.full(W, 1.0), np.full(W, 2.0)
    out = self_only_fuse([q(0, 0, f1)], [q(0.8, 0, f2)])
    assert [o.feature[0] for o in out] == [1.0, 2.0]


def test_fuse_time_is_score_weighted():
    out = knn_fuse([q(0, 0, score=0.75, t=1.0)], [q(0, 0, score=0.25, t=2.0)], k=2)
    assert math.isclose(out[0].t, 1.25)


pts = st.lists(st.tuples(st.integers(-6, 6), st.integers(-6, 6), st.floats(-2, 2)), min_size=1, max_size=8)


@given(pts, pts, st.integers(1, 6), st.randoms(use_true_random=False))
def test_fuse_properties(ego_spec, coop_spec, k, rnd):
    ego = [q(x * 0.8, y * 0.8, np.full(W, v)) for x, y, v in ego_spec]
    coop = [q(x * 0.8, y * 0.8, np.full(W, v)) for x, y, v in coop_spec]
    out = knn_fuse(ego, coop, k=k)
    assert len(out) <= len(ego) + len(coop)
    bound = 2 * max(abs(v) for _, _, v in ego_spec + coop_spec)
    assert max(np.max(np.abs(o.feature)) for o in out) <= bound + 1e-12
    # permuting the input leaves each node's pooled feature unchanged
    shuffled = list(coop)
    rnd.shuffle(shuffled)
    a = {(o.x, o.y): o.feature for o in out}
    b = {(o.x, o.y): o.feature for o in knn_fuse(ego, shuffled, k=k)}
    assert a.keys() == b.keys()
    if k >= len(ego) + len(coop):
        for key in a:
            assert np.allclose(a[key], b[key])
