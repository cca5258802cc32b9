import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsecoop.cpm import (
    EMPTY_SIZE,
    FLAG_MOTION,
    SIZE_LIMIT_BYTES,
    Cpm,
    CpmDecodeError,
    cpm_size,
    decode_cpm,
    encode_cpm,
    hex_dump,
    round_trip_equal,
    select_by_score,
    select_cpm,
)
from sparsecoop.geometry import BBox, Pose
from sparsecoop.temporal import Query

FIXTURE = Path(__file__).parent / "fixtures" / "cpm_small.cpm"


def small_cpm() -> Cpm:
    queries = [
        Query(np.array([1.0, -2.0, 0.5, 0.25]), 0.8, -1.6, 0.75, 0.125),
        Query(np.array([0.0, 0.0, 3.0, -1.0]), 2.4, 0.0, 0.5, 0.25),
    ]
    boxes = [BBox(10.0, -3.5, -0.9, 4.5, 1.875, 1.5, 0.5, 0.875, 0.25)]
    return Cpm(3, Pose(1.0, 2.0, 0.0, 0.25), 1.5, queries, boxes, FLAG_MOTION)


def test_empty_size():
    c = Cpm(1, Pose(), 0.0)
    assert EMPTY_SIZE == 84 and cpm_size(c) == 84 and len(encode_cpm(c)) == 84


def test_single_query_size():
    c = Cpm(1, Pose(), 0.0, [Query(np.zeros(256), 0, 0)])
    assert cpm_size(c) == 1124 == len(encode_cpm(c))


def test_default_budget_size():
    c = Cpm(1, Pose(), 0.0, [Query(np.zeros(256), 0, 0, 0.5)] * 1024)
    assert cpm_size(c) == 1_065_044 < SIZE_LIMIT_BYTES
    assert len(encode_cpm(c)) == 1_065_044


def test_golden_fixture_bytes():
    data = encode_cpm(small_cpm())
    assert data == FIXTURE.read_bytes()
    assert len(data) == 84 + 2 * (4 * 4 + 16) + 40
    # hand-parse a few fields
    assert data[:4] == b"CPM1"
    assert struct.unpack_from("<I", data, 6)[0] == 3
    assert struct.unpack_from("<d", data, 12)[0] == 1.5
    assert struct.unpack_from("<4d", data, 28) == (1.0, 2.0, 0.0, 0.25)
    assert struct.unpack_from("<8f", data, 84) == (1.0, -2.0, 0.5, 0.25, np.float32(0.8), np.float32(-1.6), 0.75, 0.125)
    assert data[-4:] == b"\x00\x00\x00\x00"


def test_decode_golden_fixture():
    c = decode_cpm(FIXTURE.read_bytes())
    assert c.agent_id == 3 and c.flags == FLAG_MOTION and c.t == 1.5
    assert len(c.queries) == 2 and len(c.boxes) == 1
    assert c.boxes[0].l == 4.5 and c.queries[1].x == np.float32(2.4)


def test_round_trip_reencode_identical():
    data = encode_cpm(small_cpm())
    assert encode_cpm(decode_cpm(data)) == data
    assert round_trip_equal(small_cpm(), decode_cpm(data))


f32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@st.composite
def cpms(draw):
    width = draw(st.integers(0, 12))
    nq = draw(st.integers(0, 5)) if width else 0
    queries = [
        Query(np.array(draw(st.lists(f32, min_size=width, max_size=width))), draw(f32), draw(f32), draw(st.floats(0, 1, width=32)), draw(f32))
        for _ in range(nq)
    ]
    boxes = [
        BBox(draw(f32), draw(f32), draw(f32), draw(st.floats(0.125, 10, width=32)), draw(st.floats(0.125, 10, width=32)), draw(st.floats(0.125, 5, width=32)),
             draw(st.floats(-3.0, 3.0, width=32)), draw(st.floats(0, 1, width=32)), draw(f32))
        for _ in range(draw(st.integers(0, 4)))
    ]
    pose = Pose(draw(st.floats(-1e4, 1e4)), draw(st.floats(-1e4, 1e4)), draw(st.floats(-10, 10)), draw(st.floats(-math.pi, math.pi, exclude_max=True)))
    return Cpm(draw(st.integers(0, 2**32 - 1)), pose, draw(st.floats(0, 1e6)), queries, boxes, draw(st.integers(0, 3)), width)


@given(cpms())
def test_round_trip_property(c):
    data = encode_cpm(c)
    back = decode_cpm(data)
    assert encode_cpm(back) == data
    assert len(data) == cpm_size(c)
    assert back.pose == c.pose and back.t == c.t and back.agent_id == c.agent_id


@given(cpms(), st.floats(0, 1), st.floats(0, 1))
def test_size_monotone_in_threshold(c, t1, t2):
    lo, hi = sorted((t1, t2))
    assert cpm_size(select_cpm(c, lo)) >= cpm_size(select_cpm(c, hi))


def test_selection_strict():
    qs = [Query(np.zeros(2), 0, 0, s) for s in (0.0, 0.2, 0.5, 0.9)]
    assert [q.score for q in select_by_score(qs, [], 0.5)[0]] == [0.9]
    assert [q.score for q in select_by_score(qs, [], 0.0)[0]] == [0.2, 0.5, 0.9]
    assert select_by_score(qs, [], 1.0)[0] == []
    with pytest.raises(ValueError):
        select_by_score(qs, [], 1.5)


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda d: d[:10], 10),
        (lambda d: b"XPM1" + d[4:], 0),
        (lambda d: d[:4] + b"\x09\x00" + d[6:], 4),
        (lambda d: d[:60], 60),
        (lambda d: d[:100], 100),
        (lambda d: d + b"\x00", 188),
    ],
)
def test_decode_errors_name_offset(mutate, offset):
    with pytest.raises(CpmDecodeError) as err:
        decode_cpm(mutate(encode_cpm(small_cpm())))
    assert err.value.offset == offset
    assert f"offset {offset}" in str(err.value)


def test_encode_rejects_mixed_widths():
    c = Cpm(1, Pose(), 0.0, [Query(np.zeros(2), 0, 0), Query(np.zeros(3), 0, 0)])
    with pytest.raises(ValueError):
        encode_cpm(c)


def test_hex_dump_layout():
    lines = hex_dump(bytes(range(20))).splitlines()
    assert lines[1] == "00000010  10 11 12 13"
