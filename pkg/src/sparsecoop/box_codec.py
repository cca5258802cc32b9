"""Regression target encoding for boxes, including the compass-rose heading code.

The compass-rose code describes a heading against four quadrant anchors:
per-anchor cos/sin offsets plus an angular-proximity score per anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox, wrap_angle

ANCHORS = np.array([0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi])
_COS_A = np.cos(ANCHORS)
_SIN_A = np.sin(ANCHORS)


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class CompassCode:
    dir_offsets: np.ndarray  # 4 cos offsets then 4 sin offsets
    scores: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dir_offsets, self.scores])

    @classmethod
    def from_vector(cls, v) -> CompassCode:
        v = np.asarray(v, dtype=float)
        if v.shape != (12,):
            raise DecodeError(f"compass vector must have 12 entries, got {v.shape}")
        return cls(v[:8].copy(), v[8:].copy())


def compass_encode(r_g: float) -> CompassCode:
    r = wrap_angle(r_g)
    c, s = math.cos(r), math.sin(r)
    offsets = np.concatenate([c - _COS_A, s - _SIN_A])
    cos_dist = np.clip(_COS_A * c + _SIN_A * s, -1.0, 1.0)
    scores = 1.0 - np.arccos(cos_dist) / math.pi
    return CompassCode(offsets, scores)


def compass_decode(code: CompassCode) -> float:
    """Heading from the highest-scoring anchor plus its offsets (ties: lowest index)."""
    scores = np.asarray(code.scores, dtype=float)
    off = np.asarray(code.dir_offsets, dtype=float)
    if scores.shape != (4,) or off.shape != (8,):
        raise DecodeError("malformed compass code")
    a = int(np.argmax(scores))
    cx = _COS_A[a] + off[a]
    sy = _SIN_A[a] + off[4 + a]
    if math.hypot(cx, sy) < 1e-9:
        raise DecodeError("degenerate direction vector")
    return wrap_angle(math.atan2(sy, cx))


# -- alternative heading encodings for comparison harnesses ---------------------


class AngleCodec:
    name = "base"
    width = 0

    def encode(self, r: float) -> np.ndarray:
        raise NotImplementedError

    def decode(self, v: np.ndarray) -> float:
        raise NotImplementedError


class CompassCodec(AngleCodec):
    name = "compass"
    width = 12

    def encode(self, r):
        return compass_encode(r).as_vector()

    def decode(self, v):
        return compass_decode(CompassCode.from_vector(v))


class GtAngleCodec(AngleCodec):
    """Regress the raw heading."""

    name = "gt-angle"
    width = 1

    def encode(self, r):
        return np.array([wrap_angle(r)])

    def decode(self, v):
        return wrap_angle(float(v[0]))


class SecondCodec(AngleCodec):
    """Heading folded into [-pi/2, pi/2) plus a binary direction class."""

    name = "second"
    width = 2

    def encode(self, r):
        r = wrap_angle(r)
        folded = wrap_angle(2 * r) / 2
        flipped = abs(wrap_angle(r - folded)) > math.pi / 2
        return np.array([folded, 1.0 if flipped else 0.0])

    def decode(self, v):
        return wrap_angle(float(v[0]) + (math.pi if v[1] >= 0.5 else 0.0))


class SinCosCodec(AngleCodec):
    name = "sin_cos"
    width = 2

    def encode(self, r):
        return np.array([math.sin(r), math.cos(r)])

    def decode(self, v):
        if math.hypot(v[0], v[1]) < 1e-9:
            raise DecodeError("degenerate direction vector")
        return wrap_angle(math.atan2(v[0], v[1]))


ANGLE_CODECS: dict[str, AngleCodec] = {c.name: c for c in (GtAngleCodec(), SecondCodec(), SinCosCodec(), CompassCodec())}


# -- box targets ------------------------------------------------------------------


@dataclass(frozen=True)
class BoxTargets:
    dx: float
    dy: float
    dz: float
    l: float
    w: float
    h: float
    compass: CompassCode

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.dx, self.dy, self.dz, self.l, self.w, self.h], self.compass.as_vector()])


def _query3(q) -> tuple[float, float, float]:
    q = tuple(float(v) for v in q)
    if len(q) == 2:
        return q[0], q[1], 0.0
    if len(q) == 3:
        return q
    raise ValueError("query point must be (x, y) or (x, y, z)")


def encode_targets(box: BBox, query) -> BoxTargets:
    qx, qy, qz = _query3(query)
    return BoxTargets(box.cx - qx, box.cy - qy, box.cz - qz, box.l, box.w, box.h, compass_encode(box.yaw))


def decode_targets(t: BoxTargets, query, score: float = 1.0, time: float = 0.0) -> BBox:
    qx, qy, qz = _query3(query)
    return BBox(qx + t.dx, qy + t.dy, qz + t.dz, t.l, t.w, t.h, compass_decode(t.compass), score, time)


def classify_queries(queries: Sequence[tuple[float, float]], boxes: Sequence[BBox]) -> list[str]:
    """``"pos"`` for queries inside (or on the edge of) any box footprint."""
    q = np.asarray(queries, dtype=float).reshape(-1, 2)
    inside = np.zeros(len(q), dtype=bool)
    for b in boxes:
        inside |= b.contains_xy(q[:, 0], q[:, 1])
    return ["pos" if v else "neg" for v in inside]
