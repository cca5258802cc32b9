"""Free-space augmentation and geometric flip/rotate augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import BBox, TimedPointCloud

GROUND_TOL = 0.05


@dataclass(frozen=True)
class LidarModel:
    height_h: float = 1.9
    ring_inclinations: tuple[float, ...] = field(
        default_factory=lambda: tuple(np.deg2rad(np.linspace(-24.8, 2.0, 64)).tolist())
    )
    azimuth_step: float = math.radians(0.2)
    sweep_time: float = 0.1
    max_range: float = 150.0

    def __post_init__(self) -> None:
        incl = tuple(float(v) for v in self.ring_inclinations)
        object.__setattr__(self, "ring_inclinations", incl)
        if any(b <= a for a, b in zip(incl, incl[1:])):
            raise ValueError("ring_inclinations must be strictly increasing")
        if self.azimuth_step <= 0 or self.sweep_time <= 0:
            raise ValueError("azimuth_step and sweep_time must be positive")
        if self.height_h <= 0:
            raise ValueError("height_h must be positive")

    @property
    def n_columns(self) -> int:
        return int(round(2 * math.pi / self.azimuth_step))

    def ground_radius(self, ring: int) -> float:
        """Ground distance of a downward ring on flat ground (inf if it never lands)."""
        incl = self.ring_inclinations[ring]
        if incl >= 0:
            return math.inf
        return self.height_h / math.tan(-incl)


def fsa_gap(d_i: float, h: float, alpha: float) -> float:
    """Ground gap between ray ``i`` landing at ``d_i`` and the ray ``alpha`` below it."""
    if d_i <= 0 or h <= 0:
        raise ValueError("d_i and h must be positive")
    from_vertical = math.atan(d_i / h) - alpha
    if from_vertical < -1e-12:  # straight down (0) still lands, at the sensor foot
        raise ValueError("lower ray does not hit the ground in front of the sensor")
    # d - h tan(atan(d/h) - alpha), expanded with the tangent subtraction formula
    t = math.tan(alpha)
    return t * (d_i * d_i + h * h) / (h + d_i * t)


def fsa_augment(pc: TimedPointCloud, model: LidarModel, spacing: float = 0.5) -> TimedPointCloud:
    """Add ground-plane free-space points between adjacent rings.

    Rings and azimuth columns are recovered from point geometry. For every
    column where two adjacent rings both hit flat ground, points are spread
    evenly (at most ``spacing`` apart) strictly between the two ground radii.
    Added points are flagged ``free`` and share the column's timestamp.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if len(pc) == 0:
        return TimedPointCloud.empty(pc.frame)
    h = model.height_h
    xyz = pc.points[:, :3]
    ground = (~pc.free) & (np.abs(xyz[:, 2] + h) < GROUND_TOL)
    idx = np.nonzero(ground)[0]
    if len(idx) == 0:
        return _with_extra(pc, np.zeros((0, 4)))
    r = np.hypot(xyz[idx, 0], xyz[idx, 1])
    incl = np.arctan2(xyz[idx, 2], r)
    rings_arr = np.asarray(model.ring_inclinations)
    ring = np.abs(incl[:, None] - rings_arr[None, :]).argmin(axis=1)
    az = np.mod(np.arctan2(xyz[idx, 1], xyz[idx, 0]), 2 * math.pi)
    col = np.round(az / model.azimuth_step).astype(np.int64) % model.n_columns

    # index ground hits by (column, ring); duplicates resolve to the last hit
    n_rings = len(rings_arr)
    key = col * n_rings + ring
    order = np.argsort(key, kind="stable")
    sorted_keys = key[order]
    want = key - 1
    pos = np.searchsorted(sorted_keys, want, side="right") - 1
    found = (ring > 0) & (pos >= 0) & (sorted_keys[np.maximum(pos, 0)] == want)
    outer = np.nonzero(found)[0]
    lower = order[pos[found]]
    gap = r[outer] - r[lower]
    n_int = np.where(gap > 0, np.ceil(gap / spacing) - 1, 0).astype(np.int64)
    keep = n_int > 0
    outer, lower, gap, n_int = outer[keep], lower[keep], gap[keep], n_int[keep]
    total = int(n_int.sum())
    new = np.empty((total, 4))
    if total:
        which = np.repeat(np.arange(len(outer)), n_int)
        start = np.cumsum(n_int) - n_int
        step = np.arange(total) - start[which] + 1
        frac = step / (n_int[which] + 1)
        radii = r[lower][which] + frac * gap[which]
        a = az[outer][which]
        t_out = pc.points[idx[outer], 3][which]
        t_in = pc.points[idx[lower], 3][which]
        new[:, 0] = radii * np.cos(a)
        new[:, 1] = radii * np.sin(a)
        new[:, 2] = -h
        new[:, 3] = t_in + frac * (t_out - t_in)
    return _with_extra(pc, new)


def _with_extra(pc: TimedPointCloud, extra: np.ndarray) -> TimedPointCloud:
    labels = None
    if pc.labels is not None:
        labels = np.concatenate([pc.labels, np.full(len(extra), -2, dtype=np.int64)])
    return TimedPointCloud(
        np.concatenate([pc.points, extra]),
        frame=pc.frame,
        free=np.concatenate([pc.free, np.ones(len(extra), dtype=bool)]),
        labels=labels,
    )


def flip_rotate(
    pc: TimedPointCloud,
    boxes: Sequence[BBox],
    flip_x: bool = False,
    flip_y: bool = False,
    yaw: float = 0.0,
) -> tuple[TimedPointCloud, list[BBox]]:
    """Mirror (negate x and/or y), then rotate about z by ``yaw``."""
    if abs(yaw) > math.pi / 2 + 1e-12:
        raise ValueError("rotation must lie in [-pi/2, pi/2]")
    pts = pc.points.copy()
    sx = -1.0 if flip_x else 1.0
    sy = -1.0 if flip_y else 1.0
    pts[:, 0] *= sx
    pts[:, 1] *= sy
    c, s = math.cos(yaw), math.sin(yaw)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    out_boxes = []
    for b in boxes:
        bx, by, heading = sx * b.cx, sy * b.cy, b.yaw
        if flip_x:
            heading = math.pi - heading
        if flip_y:
            heading = -heading
        out_boxes.append(replace(b, cx=c * bx - s * by, cy=s * bx + c * by, yaw=heading + yaw))
    cloud = TimedPointCloud(pts, frame=pc.frame, free=pc.free.copy(), labels=None if pc.labels is None else pc.labels.copy())
    return cloud, out_boxes


def random_flip_rotate(pc: TimedPointCloud, boxes: Sequence[BBox], rng: np.random.Generator):
    """Train-time augmentation with rotation drawn from [-90 deg, 90 deg]."""
    fx, fy = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    yaw = float(rng.uniform(-math.pi / 2, math.pi / 2))
    return flip_rotate(pc, boxes, fx, fy, yaw)
