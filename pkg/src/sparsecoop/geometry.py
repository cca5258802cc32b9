"""Poses, oriented boxes, timed point clouds and box overlap.

Rotations are yaw-only: ``z`` is carried through every transform but never
rotated. A pose ``T = (x, y, z, yaw)`` maps a point ``p`` expressed in its
local frame into the parent frame as ``R(yaw) p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to the half-open interval [-pi, pi)."""
    if -math.pi <= a < math.pi:
        return a
    w = (a + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on +pi for inputs just below -pi
    if w >= math.pi:
        w -= TWO_PI
    return w


def wrap_angles(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    w = np.mod(a + math.pi, TWO_PI) - math.pi
    w = np.where(w >= math.pi, w - TWO_PI, w)
    return np.where((a >= -math.pi) & (a < math.pi), a, w)


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def yaw_matrix(yaw: float) -> np.ndarray:
    """3x3 rotation about z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.yaw)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        m = np.eye(4)
        m[:3, :3] = yaw_matrix(self.yaw)
        m[:3, 3] = (self.x, self.y, self.z)
        return m

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (N, 2) or (N, 3) array of points into the parent frame."""
        pts = np.asarray(pts, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(pts)
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.y
        if pts.shape[-1] > 2:
            out[..., 2] = pts[..., 2] + self.z
            out[..., 3:] = pts[..., 3:]
        return out

    def __matmul__(self, other: Pose) -> Pose:
        return compose_pose(self, other)


def compose_pose(a: Pose, b: Pose) -> Pose:
    """Return ``a * b``: apply ``b`` first, then ``a``."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.z + b.z,
        a.yaw + b.yaw,
    )


def invert_pose(p: Pose) -> Pose:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.z, -p.yaw)


def relative_pose(reference: Pose, other: Pose) -> Pose:
    """``inverse(reference) * other``: maps ``other``'s frame into ``reference``'s."""
    return compose_pose(invert_pose(reference), other)


@dataclass(frozen=True)
class BBox:
    """Oriented 3D box; ``cz`` is the geometric center height."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    score: float = 1.0
    t: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def is_valid(self) -> bool:
        return self.l > 0 and self.w > 0 and self.h > 0

    def corners_bev(self) -> np.ndarray:
        """Four BEV corners, counter-clockwise."""
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ rot2(self.yaw).T + (self.cx, self.cy)

    def transformed(self, T: Pose) -> BBox:
        c, s = math.cos(T.yaw), math.sin(T.yaw)
        return replace(
            self,
            cx=T.x + c * self.cx - s * self.cy,
            cy=T.y + s * self.cx + c * self.cy,
            cz=self.cz + T.z,
            yaw=self.yaw + T.yaw,
        )

    def contains_xy(self, x, y, tol: float = 1e-9):
        """Edge-inclusive BEV containment; accepts scalars or arrays."""
        dx = np.asarray(x, dtype=float) - self.cx
        dy = np.asarray(y, dtype=float) - self.cy
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (np.abs(u) <= 0.5 * self.l + tol) & (np.abs(v) <= 0.5 * self.w + tol)


@dataclass
class TimedPointCloud:
    """LiDAR returns as an (N, 4) array of x, y, z, t.

    ``free`` marks synthetic free-space points; ``labels`` is an optional
    per-point hit id (-1 for ground) filled by the simulator.
    """

    points: np.ndarray
    frame: str = "ego"
    free: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 4)
        n = len(self.points)
        if self.free is None:
            self.free = np.zeros(n, dtype=bool)
        else:
            self.free = np.asarray(self.free, dtype=bool).reshape(n)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.points[:, 3]

    @classmethod
    def empty(cls, frame: str = "ego") -> TimedPointCloud:
        return cls(np.zeros((0, 4)), frame=frame)

    def subset(self, mask: np.ndarray) -> TimedPointCloud:
        return TimedPointCloud(
            self.points[mask],
            frame=self.frame,
            free=self.free[mask],
            labels=None if self.labels is None else self.labels[mask],
        )

    def time_window(self) -> tuple[float, float]:
        if len(self) == 0:
            return (0.0, 0.0)
        return (float(self.t.min()), float(self.t.max()))


def concat_clouds(clouds: Sequence[TimedPointCloud], frame: str | None = None) -> TimedPointCloud:
    if not clouds:
        return TimedPointCloud.empty(frame or "ego")
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    return TimedPointCloud(
        np.concatenate([c.points for c in clouds]),
        frame=frame or clouds[0].frame,
        free=np.concatenate([c.free for c in clouds]),
        labels=labels,
    )


def transform_points(pc: TimedPointCloud, T: Pose, frame: str | None = None) -> TimedPointCloud:
    pts = pc.points.copy()
    pts[:, :3] = T.apply(pc.points[:, :3])
    return TimedPointCloud(
        pts,
        frame=pc.frame if frame is None else frame,
        free=pc.free.copy(),
        labels=None if pc.labels is None else pc.labels.copy(),
    )


# -- polygon overlap -------------------------------------------------------

_MERGE_EPS = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _dedupe(poly: list[np.ndarray]) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for p in poly:
        if not out or np.max(np.abs(p - out[-1])) > _MERGE_EPS:
            out.append(p)
    if len(out) > 1 and np.max(np.abs(out[0] - out[-1])) <= _MERGE_EPS:
        out.pop()
    return out


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``."""
    out = [np.asarray(p, dtype=float) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            prev, sp = cur, sc
        out = _dedupe(out)
    if len(out) < 3:
        return np.zeros((0, 2))
    return np.array(out)


def bev_intersection_area(a: BBox, b: BBox) -> float:
    # cheap reject on circumradius
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    return max(polygon_area(clip_convex(a.corners_bev(), b.corners_bev())), 0.0)


def bev_iou(a: BBox, b: BBox) -> float:
    area_a, area_b = a.l * a.w, b.l * b.w
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: BBox, b: BBox) -> float:
    vol_a, vol_b = a.l * a.w * a.h, b.l * b.w * b.h
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    top = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h)
    bottom = max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    dz = top - bottom
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = vol_a + vol_b - inter
    return min(max(inter / union, 0.0), 1.0)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """(N, 9) array: cx, cy, cz, l, w, h, yaw, score, t."""
    if not boxes:
        return np.zeros((0, 9))
    return np.array([[b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.score, b.t] for b in boxes], dtype=float)


def boxes_from_array(arr: np.ndarray) -> list[BBox]:
    return [BBox(*map(float, row)) for row in np.asarray(arr).reshape(-1, 9)]


__all__ = [
    "BBox",
    "Pose",
    "TimedPointCloud",
    "bev_intersection_area",
    "bev_iou",
    "boxes_from_array",
    "boxes_to_array",
    "clip_convex",
    "compose_pose",
    "concat_clouds",
    "invert_pose",
    "iou_3d",
    "polygon_area",
    "relative_pose",
    "rot2",
    "transform_points",
    "wrap_angle",
    "wrap_angles",
    "yaw_matrix",
]

