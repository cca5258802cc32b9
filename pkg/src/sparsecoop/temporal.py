"""Memory queue of historical object queries and constant-velocity prediction.

Velocities come from a least-squares fit constrained through the query's own
observation, so predicting at the observation time reproduces it exactly.
History is associated by ``track_id`` when available, otherwise by chained
nearest-neighbor gating one frame at a time.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import BBox

TOP_K = 256
MAX_FRAMES = 4
GATE_RADIUS = 3.0
DEFAULT_FEATURE_WIDTH = 256

# feature slots written by the sender: planar velocity in the sender frame
MOTION_SLOTS = slice(0, 2)


@dataclass(frozen=True)
class Query:
    feature: np.ndarray
    x: float
    y: float
    score: float = 1.0
    t: float = 0.0
    track_id: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"query score {self.score} outside [0, 1]")
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=float))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def velocity(self) -> np.ndarray:
        return self.feature[MOTION_SLOTS].copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.x == other.x
            and self.y == other.y
            and self.score == other.score
            and self.t == other.t
            and self.track_id == other.track_id
            and np.array_equal(self.feature, other.feature)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class MemoryFrame:
    t: float
    queries: tuple[Query, ...]


class TimestampError(ValueError):
    pass


@dataclass
class MemoryQueue:
    max_frames: int = MAX_FRAMES
    top_k: int = TOP_K
    frames: deque = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def newest_t(self) -> float | None:
        return self.frames[-1].t if self.frames else None

    def total_queries(self) -> int:
        return sum(len(f.queries) for f in self.frames)

    def push(self, queries: Sequence[Query], t: float) -> MemoryQueue:
        if self.frames and not t > self.frames[-1].t:
            raise TimestampError(f"timestamp {t} is not newer than {self.frames[-1].t}")
        self.frames.append(MemoryFrame(float(t), tuple(top_k_queries(queries, self.top_k))))
        while len(self.frames) > self.max_frames:
            self.frames.popleft()
        return self


def top_k_queries(queries: Sequence[Query], k: int = TOP_K) -> list[Query]:
    """Highest scores first; ties go to the lower track id, then the lower index."""
    order = sorted(
        range(len(queries)),
        key=lambda i: (-queries[i].score, queries[i].track_id if queries[i].track_id is not None else math.inf, i),
    )
    return [queries[i] for i in order[:k]]


def memory_push(mq: MemoryQueue, queries: Sequence[Query], t: float) -> MemoryQueue:
    return mq.push(queries, t)


def _nearest(frame: MemoryFrame, x: float, y: float, gate: float) -> Query | None:
    best, best_d = None, math.inf
    for q in frame.queries:
        d = math.hypot(q.x - x, q.y - y)
        # strict < keeps the lowest index on ties
        if d <= gate and d < best_d:
            best, best_d = q, d
    return best


def history_of(mq: MemoryQueue, query: Query, gate: float = GATE_RADIUS) -> list[tuple[float, float, float]]:
    """Matched (t, x, y) observations older than ``query``, newest first."""
    out = []
    x, y = query.x, query.y
    for frame in reversed(mq.frames):
        if frame.t >= query.t:
            continue
        match = None
        if query.track_id is not None:
            for q in frame.queries:
                if q.track_id == query.track_id:
                    match = q
                    break
        else:
            match = _nearest(frame, x, y, gate)
        if match is None:
            if query.track_id is None:
                break  # chain broken
            continue
        out.append((match.t, match.x, match.y))
        x, y = match.x, match.y
    return out


def estimate_velocity(mq: MemoryQueue, query: Query, gate: float = GATE_RADIUS) -> np.ndarray:
    """Least-squares velocity through the query's own observation; zero without history."""
    hist = history_of(mq, query, gate)
    if not hist:
        return np.zeros(2)
    h = np.array(hist)
    dt = h[:, 0] - query.t
    denom = float(dt @ dt)
    if denom <= 0:
        return np.zeros(2)
    vx = float(dt @ (h[:, 1] - query.x)) / denom
    vy = float(dt @ (h[:, 2] - query.y)) / denom
    return np.array([vx, vy])


def predict_at_time(mq: MemoryQueue, current: Sequence[Query], t_target: float, gate: float = GATE_RADIUS) -> list[Query]:
    if mq.newest_t is not None and t_target < mq.newest_t - 1e-12:
        raise TimestampError("t_target precedes the newest stored frame")
    out = []
    for q in current:
        v = estimate_velocity(mq, q, gate)
        dt = t_target - q.t
        out.append(replace(q, x=q.x + v[0] * dt, y=q.y + v[1] * dt, t=float(t_target)))
    return out


def with_velocity(q: Query, v: np.ndarray) -> Query:
    f = q.feature.copy()
    f[MOTION_SLOTS] = v
    return replace(q, feature=f)


def _box_velocities(boxes: Sequence[BBox], queries: Sequence[Query], velocities: np.ndarray, gate: float) -> np.ndarray:
    out = np.zeros((len(boxes), 2))
    if not queries:
        return out
    qxy = np.array([[q.x, q.y] for q in queries])
    for k, b in enumerate(boxes):
        d = np.hypot(qxy[:, 0] - b.cx, qxy[:, 1] - b.cy)
        j = int(np.argmin(d))
        if d[j] <= gate:
            out[k] = velocities[j]
    return out


def compensate_latency(
    queries: Sequence[Query],
    boxes: Sequence[BBox],
    t_send: float,
    t_now: float,
    mq: MemoryQueue | None = None,
    gate: float = GATE_RADIUS,
) -> tuple[list[Query], list[BBox]]:
    """Advance queries and boxes to ``t_now``.

    With a memory queue, velocities are fitted from history; without one they
    are read from each query's motion slots. Boxes take the velocity of the
    nearest query within the gate.
    """
    if t_now < t_send:
        raise TimestampError("t_now precedes t_send")
    if mq is not None:
        vel = np.array([estimate_velocity(mq, q, gate) for q in queries]).reshape(-1, 2)
    else:
        vel = np.array([q.velocity() for q in queries]).reshape(-1, 2)
    new_q = []
    for q, v in zip(queries, vel):
        dt = t_now - q.t
        new_q.append(replace(q, x=q.x + v[0] * dt, y=q.y + v[1] * dt, t=float(t_now)))
    bv = _box_velocities(boxes, queries, vel, gate)
    new_b = []
    for b, v in zip(boxes, bv):
        dt = t_now - b.t
        new_b.append(replace(b, cx=b.cx + v[0] * dt, cy=b.cy + v[1] * dt, t=float(t_now)))
    return new_q, new_b
