from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from sparsecoop.geometry import BBox, TimedPointCloud
from sparsecoop.sparse import (
    F_COUNT,
    F_FREE,
    F_TMAX,
    F_TMIN,
    SparseGrid,
    cec_contract,
    cec_expand,
    center_coverage,
    connectivity,
    conv_coords_standard,
    dump_grid,
    expansions_needed,
    parse_grid_dump,
    sunet_coordinate_schedule,
    to_bev,
    unique_coords,
    voxelize,
)

FIXTURES = Path(__file__).parent / "fixtures"


def grid2(coords, stride=1):
    return SparseGrid.from_coords(coords, stride=stride, dims=2)


def test_voxelize_examples():
    g = voxelize(TimedPointCloud([[0.1, 0.1, 0.1, 0.0]]), 0.4)
    assert g.coord_set() == {(0, 0, 0)}
    g = voxelize(TimedPointCloud([[0.1, 0.1, 0.1, 0.0], [0.2, 0.3, 0.1, 0.05]]), 0.4)
    assert len(g) == 1 and g.features[0, F_COUNT] == 2
    assert g.features[0, F_TMIN] == 0.0 and g.features[0, F_TMAX] == 0.05
    g = voxelize(TimedPointCloud([[0.1, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0]]), 0.4)
    assert g.coord_set() == {(0, 0, 0), (1, 0, 0)}
    assert len(voxelize(TimedPointCloud.empty(), 0.4)) == 0


def test_voxelize_negative_coordinates_floor():
    g = voxelize(TimedPointCloud([[-0.1, -0.5, 0.0, 0.0]]), 0.4)
    assert g.coord_set() == {(-1, -2, 0)}


def test_voxelize_free_flag_only_for_pure_free_cells():
    pc = TimedPointCloud([[0.1, 0.1, 0.0, 0.0], [0.2, 0.2, 0.0, 0.0], [5.0, 5.0, 0.0, 0.0]], free=[True, False, True])
    g = voxelize(pc, 0.4).sorted()
    assert g.features[:, F_FREE].tolist() == [0.0, 1.0]


def test_standard_conv_examples():
    g = grid2([(0, 0), (2, 0), (5, 7)])
    assert conv_coords_standard(g).coord_set() == g.coord_set()
    down = conv_coords_standard(grid2([(0, 0), (2, 0), (3, 0)]), stride_out=2)
    assert down.stride == 2 and down.coord_set() == {(0, 0), (2, 0)}
    two = grid2([(0, 0), (6, 0)])
    for _ in range(5):
        two = conv_coords_standard(two)
    assert connectivity(two).component_count == 2


def test_cec_expand_examples():
    assert len(cec_expand(SparseGrid.empty(2))) == 0
    block = cec_expand(grid2([(0, 0)]))
    assert block.coord_set() == {(x, y) for x in (-1, 0, 1) for y in (-1, 0, 1)}
    g = grid2([(0, 0), (6, 0)])
    for n in range(1, 4):
        g = cec_expand(g)
        assert connectivity(g).component_count == (1 if n == 3 else 2)


def test_cec_expand_at_stride_moves_in_stride_units():
    g = cec_expand(grid2([(0, 0)], stride=4))
    assert g.coord_set() == {(x, y) for x in (-4, 0, 4) for y in (-4, 0, 4)}


def test_cec_keeps_existing_features_and_averages_new_ones():
    g = SparseGrid(2, 1, 0.4, np.array([[0, 0], [2, 0]]), np.array([[1.0], [3.0]]))
    e = cec_expand(g)
    feats = {tuple(c): f[0] for c, f in zip(e.coords, e.features)}
    assert feats[(0, 0)] == 1.0 and feats[(2, 0)] == 3.0
    assert feats[(1, 0)] == 2.0
    assert feats[(-1, 0)] == 1.0


def test_cec_contract_examples():
    g = grid2([(0, 0), (3, 1)])
    assert cec_contract(g, g).coord_set() == g.coord_set()
    assert cec_contract(cec_expand(g), g).coord_set() == g.coord_set()
    other = SparseGrid(2, 1, 0.4, np.array([[9, 9]]), np.ones((1, 1)))
    out = cec_contract(g, other)
    assert out.coord_set() == {(9, 9)} and out.features[0, 0] == 0.0
    with pytest.raises(ValueError):
        cec_contract(g, grid2([(0, 0)], stride=2))


def test_connectivity_examples():
    assert connectivity(SparseGrid.empty(2)).component_count == 0
    assert connectivity(grid2([(4, 4)])).component_count == 1
    assert connectivity(grid2([(0, 0), (1, 1)])).component_count == 1
    rep = connectivity(grid2([(0, 0), (3, 0)]))
    assert rep.component_count == 2 and rep.largest_gap == 3


def test_largest_gap_is_max_nearest_neighbor_gap():
    g = grid2([(0, 0), (3, 0), (20, 0)])
    # nearest foreign component: 3, 3, 17
    assert connectivity(g).largest_gap == 17


def test_center_coverage_examples():
    g = grid2([(0, 0), (5, 5)])
    assert center_coverage(g, []) == 1.0
    on_cell = BBox(0.2, 0.2, 0, 4, 2, 1)
    assert center_coverage(g, [on_cell]) == 1.0
    assert center_coverage(g, [on_cell, BBox(20.2, 20.2, 0, 4, 2, 1)]) == 0.5


def test_center_coverage_ring_needs_two_expansions():
    ring = [(x, y) for x in range(-2, 3) for y in range(-2, 3) if max(abs(x), abs(y)) == 2]
    g = grid2(ring)
    box = [BBox(0.2, 0.2, 0, 2, 2, 1)]
    assert center_coverage(g, box) == 0.0
    assert center_coverage(cec_expand(g), box) == 0.0
    assert center_coverage(cec_expand(cec_expand(g)), box) == 1.0


def test_expansions_needed_formula():
    assert expansions_needed(6) == 3
    assert expansions_needed(1) == 0
    assert expansions_needed(2) == 1
    assert expansions_needed(5, kernel=5) == 1


def test_to_bev_averages_stacked_voxels():
    g = SparseGrid(3, 1, 0.4, np.array([[0, 0, 0], [0, 0, 1], [1, 0, 0]]), np.array([[1.0], [3.0], [5.0]]))
    b = to_bev(g).sorted()
    assert b.coord_set() == {(0, 0), (1, 0)}
    assert b.features[:, 0].tolist() == [2.0, 5.0]


def test_stride_validation():
    with pytest.raises(ValueError):
        SparseGrid(2, 2, 0.4, np.array([[1, 0]]), np.ones((1, 1)))
    with pytest.raises(ValueError):
        conv_coords_standard(grid2([(0, 0)], stride=2), stride_out=3)


def test_unique_coords_matches_numpy(rng):
    a = rng.integers(-50, 50, size=(500, 3))
    u, inv, cnt = unique_coords(a, return_inverse=True, return_counts=True)
    ref, ref_inv, ref_cnt = np.unique(a, axis=0, return_inverse=True, return_counts=True)
    assert np.array_equal(u, ref)
    assert np.array_equal(inv, ref_inv.reshape(-1))
    assert np.array_equal(cnt, ref_cnt)


@given(st.lists(st.tuples(st.integers(-30, 30), st.integers(-30, 30)), min_size=1, max_size=40))
def test_cec_is_dilation_and_superset(coords):
    g = grid2(coords)
    e = cec_expand(g)
    assert g.coord_set() <= e.coord_set()
    expected = {(x + dx, y + dy) for x, y in g.coord_set() for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
    assert e.coord_set() == expected


@given(st.lists(st.tuples(st.integers(-30, 30), st.integers(-30, 30)), min_size=1, max_size=40))
def test_standard_conv_never_adds_components(coords):
    g = grid2(coords)
    assert connectivity(conv_coords_standard(g)).component_count == connectivity(g).component_count


def test_schedule_contracts_back_onto_encoder_coordinates(rng):
    pts = np.column_stack([rng.uniform(-10, 10, (2000, 3)), np.zeros(2000)])
    g = voxelize(TimedPointCloud(pts), 0.4)
    for use_cec in (False, True):
        s = sunet_coordinate_schedule(g, use_cec=use_cec)
        assert s["p2"].coord_set() == s["s2"].coord_set()
        assert s["p4"].stride == 4
    plain = sunet_coordinate_schedule(g, use_cec=False)
    grown = sunet_coordinate_schedule(g, use_cec=True)
    assert connectivity(grown["s8"]).component_count <= connectivity(plain["s8"]).component_count


def test_grid_dump_golden():
    pc = TimedPointCloud(
        [[0.1, 0.1, 0.1, 0.0], [0.2, 0.3, 0.1, 0.05], [0.5, -0.3, 0.9, 0.1], [-1.0, 2.0, 0.0, 0.02]],
        free=[False, False, False, True],
    )
    g = voxelize(pc, 0.4)
    text = dump_grid(g)
    assert text == (FIXTURES / "grid_small.txt").read_text()
    back = parse_grid_dump(text)
    assert back.coord_set() == g.coord_set()
    assert dump_grid(back) == text


def test_grid_dump_rejects_garbage():
    with pytest.raises(ValueError, match="line 1"):
        parse_grid_dump("1 0 0 0 no bar here\n")


def _brute_components(mask: np.ndarray) -> int:
    return ndimage.label(mask, structure=np.ones((3,) * mask.ndim))[1]


def test_expansion_matches_brute_force_dilation(rng):
    for _ in range(20):
        dims = int(rng.integers(2, 4))
        size = 20
        mask = rng.random((size,) * dims) < 0.03
        if not mask.any():
            continue
        coords = np.argwhere(mask)
        g = SparseGrid.from_coords(coords.tolist(), dims=dims)
        e = cec_expand(g)
        pad = np.pad(mask, 1)
        dil = ndimage.binary_dilation(pad, structure=np.ones((3,) * dims))
        assert e.coord_set() == {tuple(int(v) - 1 for v in c) for c in np.argwhere(dil)}
        assert connectivity(e).component_count == _brute_components(dil)
