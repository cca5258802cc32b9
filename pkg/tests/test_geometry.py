import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from conftest import pose_close
from sparsecoop.geometry import (
    BBox,
    Pose,
    TimedPointCloud,
    bev_iou,
    compose_pose,
    invert_pose,
    iou_3d,
    relative_pose,
    transform_points,
    wrap_angle,
)

coord = st.floats(-100, 100, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose, coord, coord, st.floats(-5, 5), angle)


def test_compose_examples():
    p = Pose(1.5, -2.0, 0.3, 0.7)
    assert pose_close(compose_pose(Pose.identity(), p), p)
    assert pose_close(compose_pose(p, invert_pose(p)), Pose.identity())
    assert pose_close(compose_pose(Pose(1, 0, 0, math.pi / 2), Pose(1, 0, 0, 0)), Pose(1, 1, 0, math.pi / 2))


def test_invert_examples():
    assert pose_close(invert_pose(Pose.identity()), Pose.identity())
    assert pose_close(invert_pose(Pose(1, 2, 0, 0)), Pose(-1, -2, 0, 0))
    # -R^T t with R = rot(pi/2), t = (1, 0): R^T t = (0, -1), negated (0, 1)
    assert pose_close(invert_pose(Pose(1, 0, 0, math.pi / 2)), Pose(0, 1, 0, -math.pi / 2))


def test_pose_matches_homogeneous_matrices():
    a, b = Pose(1, 2, 0.5, 0.3), Pose(-4, 0.5, -0.2, 2.9)
    m = a.matrix() @ b.matrix()
    c = compose_pose(a, b)
    assert np.allclose(c.matrix(), m, atol=1e-12)
    assert np.allclose(invert_pose(a).matrix(), np.linalg.inv(a.matrix()), atol=1e-12)


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert pose_close(compose_pose(compose_pose(a, b), c), compose_pose(a, compose_pose(b, c)), 1e-7)


@given(poses)
def test_inverse_round_trip(p):
    assert pose_close(compose_pose(invert_pose(p), p), Pose.identity(), 1e-9)
    assert pose_close(invert_pose(invert_pose(p)), p, 1e-9)


@given(poses, poses)
def test_relative_pose_recovers_other(ref, other):
    assert pose_close(compose_pose(ref, relative_pose(ref, other)), other, 1e-7)


@given(angle)
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_transform_points_examples():
    pc = TimedPointCloud(np.array([[1.0, 0.0, 0.0, 0.05], [0.0, 0.0, 0.0, 0.1]]))
    same = transform_points(pc, Pose.identity())
    assert np.array_equal(same.points, pc.points)
    shifted = transform_points(TimedPointCloud([[0, 0, 0, 0]]), Pose(1, 0, 0, 0))
    assert np.allclose(shifted.points[0, :3], [1, 0, 0])
    rot = transform_points(TimedPointCloud([[1, 0, 0, 0.2]]), Pose(0, 0, 0, math.pi / 2))
    assert np.allclose(rot.points[0], [0, 1, 0, 0.2], atol=1e-12)


def test_bev_iou_examples():
    a = BBox(0, 0, 0, 4, 2, 1)
    assert bev_iou(a, a) == 1.0
    assert bev_iou(a, BBox(50, 0, 0, 4, 2, 1)) == 0.0
    assert math.isclose(bev_iou(a, BBox(2, 0, 0, 4, 2, 1)), 1 / 3, abs_tol=1e-12)
    assert bev_iou(a, BBox(0, 0, 0, 0, 2, 1)) == 0.0


def test_bev_iou_rotated_square():
    # unit square vs the same square rotated 45 degrees: overlap is a regular octagon
    a = BBox(0, 0, 0, 1, 1, 1)
    b = BBox(0, 0, 0, 1, 1, 1, math.pi / 4)
    octagon = 2 * (math.sqrt(2) - 1)
    assert math.isclose(bev_iou(a, b), octagon / (2 - octagon), rel_tol=1e-12)


def test_iou_3d_examples():
    a = BBox(0, 0, 0, 4, 2, 2)
    assert iou_3d(a, a) == 1.0
    assert math.isclose(iou_3d(a, BBox(0, 0, 1, 4, 2, 2)), 1 / 3, abs_tol=1e-12)
    assert iou_3d(a, BBox(0, 0, 5, 4, 2, 2)) == 0.0
    assert iou_3d(a, BBox(0, 0, 0, 4, 2, 0)) == 0.0


box_st = st.builds(
    BBox,
    st.floats(-5, 5),
    st.floats(-5, 5),
    st.floats(-1, 1),
    st.floats(0.5, 6),
    st.floats(0.5, 3),
    st.floats(0.5, 3),
    st.floats(-math.pi, math.pi),
)


@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    for fn in (bev_iou, iou_3d):
        v = fn(a, b)
        assert 0.0 <= v <= 1.0
        assert math.isclose(v, fn(b, a), abs_tol=1e-9)


@given(box_st, poses)
def test_bev_iou_rigid_invariance(b, T):
    other = BBox(b.cx + 0.7, b.cy - 0.3, b.cz, b.l * 0.9, b.w, b.h, b.yaw + 0.2)
    before = bev_iou(b, other)
    after = bev_iou(b.transformed(T), other.transformed(T))
    assert math.isclose(before, after, abs_tol=1e-7)


def test_bev_iou_matches_monte_carlo(rng):
    a = BBox(0, 0, 0, 4, 2, 1, 0.3)
    b = BBox(1.2, 0.5, 0, 3.5, 1.8, 1, -0.4)
    pts = rng.uniform(-4, 4, size=(400_000, 2))
    ina = a.contains_xy(pts[:, 0], pts[:, 1])
    inb = b.contains_xy(pts[:, 0], pts[:, 1])
    est = (ina & inb).sum() / (ina | inb).sum()
    assert abs(est - bev_iou(a, b)) < 5e-3


def test_contains_xy_closed_edges():
    b = BBox(0, 0, 0, 4, 2, 1)
    assert bool(b.contains_xy(2.0, 1.0))
    assert not bool(b.contains_xy(2.01, 0.0))
