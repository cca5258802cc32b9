"""Collective perception message: binary wire format, content selection, sizing.

Layout (little-endian)::

    header (28 B)  magic "CPM1" | version u16 | agent_id u32 | flags u16 |
                   t f64 | n_queries u32 | n_boxes u16 | feature_width u16
    pose   (56 B)  x, y, z, yaw, 3 reserved, all f64
    queries        per query: feature (width x f32), x, y, score, t (f32)
    boxes   (40 B) per box: cx, cy, cz, l, w, h, yaw, score, t (f32) + 4 pad
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BBox, Pose
from .temporal import Query

MAGIC = b"CPM1"
VERSION = 1
HEADER = struct.Struct("<4sHIHdIHH")
POSE_BLOCK = struct.Struct("<7d")
BOX_RECORD = 40
HEADER_SIZE = HEADER.size
POSE_SIZE = POSE_BLOCK.size
EMPTY_SIZE = HEADER_SIZE + POSE_SIZE
SIZE_LIMIT_BYTES = 1_300_000

_F32_BELOW_PI = np.nextafter(np.float32(np.pi), np.float32(0))
while float(_F32_BELOW_PI) >= np.pi:
    _F32_BELOW_PI = np.nextafter(_F32_BELOW_PI, np.float32(0))

FLAG_MOTION = 1 << 0  # query features carry velocity slots
FLAG_TIME_ALIGNED = 1 << 1  # queries/boxes were predicted to the message time

assert HEADER_SIZE == 28 and POSE_SIZE == 56


class CpmDecodeError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass
class Cpm:
    agent_id: int
    pose: Pose
    t: float
    queries: list[Query] = field(default_factory=list)
    boxes: list[BBox] = field(default_factory=list)
    flags: int = 0
    feature_width: int | None = None

    def width(self) -> int:
        if self.queries:
            return len(self.queries[0].feature)
        return self.feature_width or 0


def query_record_size(feature_width: int) -> int:
    return feature_width * 4 + 16


def cpm_size(c: Cpm) -> int:
    return EMPTY_SIZE + len(c.queries) * query_record_size(c.width()) + len(c.boxes) * BOX_RECORD


def select_by_score(queries: Sequence[Query], boxes: Sequence[BBox], threshold: float) -> tuple[list[Query], list[BBox]]:
    """Keep items scoring strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return [q for q in queries if q.score > threshold], [b for b in boxes if b.score > threshold]


def select_cpm(c: Cpm, threshold: float) -> Cpm:
    q, b = select_by_score(c.queries, c.boxes, threshold)
    return Cpm(c.agent_id, c.pose, c.t, q, b, c.flags, c.width())


def encode_cpm(c: Cpm) -> bytes:
    width = c.width()
    if any(len(q.feature) != width for q in c.queries):
        raise ValueError("query feature widths must be uniform")
    if len(c.boxes) > 0xFFFF or width > 0xFFFF:
        raise ValueError("too many boxes or feature width too large for the header")
    parts = [
        HEADER.pack(MAGIC, VERSION, c.agent_id, c.flags, c.t, len(c.queries), len(c.boxes), width),
        POSE_BLOCK.pack(c.pose.x, c.pose.y, c.pose.z, c.pose.yaw, 0.0, 0.0, 0.0),
    ]
    if c.queries:
        q = np.empty((len(c.queries), width + 4), dtype="<f4")
        q[:, :width] = np.stack([qq.feature for qq in c.queries])
        q[:, width:] = [[qq.x, qq.y, qq.score, qq.t] for qq in c.queries]
        parts.append(q.tobytes())
    if c.boxes:
        b = np.zeros((len(c.boxes), 10), dtype="<f4")
        b[:, :9] = [[bb.cx, bb.cy, bb.cz, bb.l, bb.w, bb.h, bb.yaw, bb.score, bb.t] for bb in c.boxes]
        # f32 rounding must not push a heading onto +pi (it would re-wrap on decode)
        b[:, 6] = np.where(b[:, 6] >= np.float32(np.pi), _F32_BELOW_PI, b[:, 6])
        raw = b.view("<u4")
        raw[:, 9] = 0
        parts.append(raw.tobytes())
    return b"".join(parts)


def decode_cpm(data: bytes) -> Cpm:
    if len(data) < HEADER_SIZE:
        raise CpmDecodeError("truncated header", len(data))
    magic, version, agent_id, flags, t, nq, nb, width = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CpmDecodeError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CpmDecodeError(f"unsupported version {version}", 4)
    off = HEADER_SIZE
    if len(data) < off + POSE_SIZE:
        raise CpmDecodeError("truncated pose block", len(data))
    x, y, z, yaw, *_ = POSE_BLOCK.unpack_from(data, off)
    off += POSE_SIZE
    qsize = query_record_size(width)
    need = off + nq * qsize + nb * BOX_RECORD
    if len(data) < need:
        short = off + nq * qsize if len(data) < off + nq * qsize else need
        raise CpmDecodeError("truncated record section", min(len(data), short))
    if len(data) > need:
        raise CpmDecodeError("trailing bytes after records", need)
    queries = []
    if nq:
        q = np.frombuffer(data, dtype="<f4", count=nq * (width + 4), offset=off).reshape(nq, width + 4)
        for row in q:
            queries.append(
                Query(
                    row[:width].astype(float),
                    float(row[width]),
                    float(row[width + 1]),
                    float(row[width + 2]),
                    float(row[width + 3]),
                )
            )
        off += nq * qsize
    boxes = []
    if nb:
        b = np.frombuffer(data, dtype="<f4", count=nb * 10, offset=off).reshape(nb, 10)
        boxes = [BBox(*(float(v) for v in row[:9])) for row in b]
    return Cpm(agent_id, Pose(x, y, z, yaw), t, queries, boxes, flags, width)


def round_trip_equal(a: Cpm, b: Cpm) -> bool:
    return encode_cpm(a) == encode_cpm(b)


def hex_dump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = data[off : off + width]
        lines.append(f"{off:08x}  {chunk.hex(' ')}")
    return "\n".join(lines)


def describe(c: Cpm) -> dict:
    return {
        "agent_id": c.agent_id,
        "t": c.t,
        "pose": list(c.pose.as_tuple()),
        "flags": c.flags,
        "feature_width": c.width(),
        "n_queries": len(c.queries),
        "n_boxes": len(c.boxes),
        "size_bytes": cpm_size(c),
    }
