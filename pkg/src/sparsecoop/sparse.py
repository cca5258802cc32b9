"""Stride-tagged sparse voxel coordinate algebra.

Coordinates are always stored at stride-1 resolution (as in MinkowskiEngine),
so every coordinate of a stride-``s`` grid is a multiple of ``s``. Kernel
footprints and adjacency are measured in grid units of the grid's own stride.

Only coordinate maps and mean-feature propagation are modeled; there are no
learned kernel weights.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import BBox, TimedPointCloud

DEFAULT_VOXEL_SIZE = 0.4

# voxelize() feature layout
FEATURE_NAMES = ("count", "off_x", "off_y", "off_z", "t_min", "t_max", "t_mean", "free")
F_COUNT, F_OFFX, F_OFFY, F_OFFZ, F_TMIN, F_TMAX, F_TMEAN, F_FREE = range(8)

_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)


@dataclass(frozen=True)
class SparseGrid:
    dims: int
    stride: int
    voxel_size: float
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, self.dims)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(len(coords), -1)
        if len(feats) != len(coords):
            raise ValueError("features and coords differ in length")
        if np.any(coords % self.stride):
            raise ValueError("coordinates must be multiples of the stride")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    @property
    def cell_size(self) -> float:
        return self.voxel_size * self.stride

    def grid_units(self) -> np.ndarray:
        """Coordinates divided by the stride."""
        return self.coords // self.stride

    def coord_set(self) -> set[tuple[int, ...]]:
        return {tuple(int(v) for v in c) for c in self.coords}

    def sorted(self) -> SparseGrid:
        order = np.lexsort(self.coords.T[::-1]) if len(self) else np.arange(0)
        return SparseGrid(self.dims, self.stride, self.voxel_size, self.coords[order], self.features[order])

    @classmethod
    def empty(cls, dims: int, stride: int = 1, voxel_size: float = DEFAULT_VOXEL_SIZE, width: int = len(FEATURE_NAMES)) -> SparseGrid:
        return cls(dims, stride, voxel_size, np.zeros((0, dims), dtype=np.int64), np.zeros((0, width)))

    @classmethod
    def from_coords(cls, coords: Iterable[Sequence[int]], stride: int = 1, voxel_size: float = DEFAULT_VOXEL_SIZE, dims: int | None = None, width: int = 1) -> SparseGrid:
        """Build a grid from explicit coordinates with all-ones features; duplicates are dropped."""
        arr = np.asarray(list(coords), dtype=np.int64)
        if dims is None:
            dims = arr.shape[1] if arr.size else 2
        arr = arr.reshape(-1, dims)
        if len(arr):
            arr = np.unique(arr, axis=0)
        return cls(dims, stride, voxel_size, arr, np.ones((len(arr), width)))


@dataclass(frozen=True)
class ConnectivityReport:
    component_count: int
    component_sizes: list[int] = field(default_factory=list)
    largest_gap: int = 0


# -- coordinate hashing -----------------------------------------------------


def _keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64) + _KEY_BIAS
    if c.size and (c.min() < 0 or c.max() >= (1 << _KEY_BITS)):
        raise OverflowError("coordinate out of hashable range")
    key = np.zeros(len(c), dtype=np.int64)
    for d in range(c.shape[1]):
        key = (key << _KEY_BITS) | c[:, d]
    return key


class _CoordIndex:
    """Sorted-key lookup from coordinate to row index."""

    def __init__(self, coords: np.ndarray) -> None:
        keys = _keys(coords)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate, -1 when absent."""
        if len(self.sorted_keys) == 0:
            return np.full(len(coords), -1, dtype=np.int64)
        q = _keys(coords)
        pos = np.searchsorted(self.sorted_keys, q)
        pos = np.minimum(pos, len(self.sorted_keys) - 1)
        hit = self.sorted_keys[pos] == q
        return np.where(hit, self.order[pos], -1)


def kernel_offsets(dims: int, kernel: int, step: int = 1) -> np.ndarray:
    """All offsets of an odd cubic kernel, lexicographic, scaled by ``step``."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    r = (kernel - 1) // 2
    rng = range(-r, r + 1)
    return np.array(list(itertools.product(rng, repeat=dims)), dtype=np.int64) * step


def _neighborhood_mean(src_coords: np.ndarray, src_feats: np.ndarray, dst_coords: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Mean of ``src`` features over ``dst + offsets`` restricted to active sources."""
    index = _CoordIndex(src_coords)
    acc = np.zeros((len(dst_coords), src_feats.shape[1]))
    cnt = np.zeros(len(dst_coords))
    for off in offsets:
        idx = index.lookup(dst_coords + off)
        hit = idx >= 0
        acc[hit] += src_feats[idx[hit]]
        cnt[hit] += 1
    cnt = np.maximum(cnt, 1)
    return acc / cnt[:, None]


def _unpack_keys(keys: np.ndarray, dims: int) -> np.ndarray:
    out = np.empty((len(keys), dims), dtype=np.int64)
    mask = (1 << _KEY_BITS) - 1
    for d in range(dims):
        shift = _KEY_BITS * (dims - 1 - d)
        out[:, d] = ((keys >> shift) & mask) - _KEY_BIAS
    return out


def unique_coords(a: np.ndarray, return_inverse: bool = False, return_counts: bool = False):
    """Lexicographically sorted unique rows of an integer coordinate array."""
    a = np.asarray(a, dtype=np.int64)
    dims = a.shape[1]
    if len(a) == 0:
        empty = a.reshape(0, dims)
        extras = [np.zeros(0, dtype=np.int64)] * (return_inverse + return_counts)
        return (empty, *extras) if extras else empty
    res = np.unique(_keys(a), return_inverse=return_inverse, return_counts=return_counts)
    if not (return_inverse or return_counts):
        return _unpack_keys(res, dims)
    res = list(res)
    res[0] = _unpack_keys(res[0], dims)
    if return_inverse:
        res[1] = res[1].reshape(-1)
    return tuple(res)


def _unique_rows(a: np.ndarray) -> np.ndarray:
    return unique_coords(a)


# -- operations ------------------------------------------------------------


def voxelize(pc: TimedPointCloud, voxel_size: float = DEFAULT_VOXEL_SIZE, dims: int = 3) -> SparseGrid:
    """Stride-1 grid; see ``FEATURE_NAMES`` for the per-voxel feature layout."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if dims not in (2, 3):
        raise ValueError("dims must be 2 or 3")
    width = len(FEATURE_NAMES)
    if len(pc) == 0:
        return SparseGrid.empty(dims, 1, voxel_size, width)
    xyz = pc.points[:, :3]
    cells = np.floor(xyz[:, :dims] / voxel_size).astype(np.int64)
    coords, inverse, counts = unique_coords(cells, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(coords)

    offsets = xyz.copy()
    offsets[:, :dims] -= cells * voxel_size
    t = pc.points[:, 3]
    feats = np.zeros((n, width))
    feats[:, F_COUNT] = counts
    for k, col in enumerate((F_OFFX, F_OFFY, F_OFFZ)):
        feats[:, col] = np.bincount(inverse, weights=offsets[:, k], minlength=n) / counts
    feats[:, F_TMEAN] = np.bincount(inverse, weights=t, minlength=n) / counts
    tmin = np.full(n, np.inf)
    tmax = np.full(n, -np.inf)
    np.minimum.at(tmin, inverse, t)
    np.maximum.at(tmax, inverse, t)
    feats[:, F_TMIN] = tmin
    feats[:, F_TMAX] = tmax
    free_count = np.bincount(inverse, weights=pc.free.astype(float), minlength=n)
    # 1 only for cells made purely of free-space points
    feats[:, F_FREE] = (free_count == counts).astype(float)
    return SparseGrid(dims, 1, voxel_size, coords, feats)


def downsample_coords(coords: np.ndarray, stride_out: int) -> np.ndarray:
    return np.floor_divide(coords, stride_out) * stride_out


def conv_coords_standard(g: SparseGrid, kernel: int = 3, stride_out: int | None = None) -> SparseGrid:
    """Non-expanding sparse convolution.

    Output coordinates are the input set (floor-downsampled and deduplicated
    when ``stride_out`` exceeds the input stride). Features are the mean over
    the kernel neighborhood of active cells on the output lattice.
    """
    stride_out = g.stride if stride_out is None else int(stride_out)
    if stride_out < g.stride or stride_out % g.stride:
        raise ValueError("stride_out must be a multiple of the input stride")
    offsets = kernel_offsets(g.dims, kernel, stride_out)
    if len(g) == 0:
        return SparseGrid.empty(g.dims, stride_out, g.voxel_size, g.feature_width)
    if stride_out == g.stride:
        src_coords, src_feats = g.coords, g.features
        out_coords = g.coords
    else:
        down = downsample_coords(g.coords, stride_out)
        out_coords, inverse = unique_coords(down, return_inverse=True)
        inverse = inverse.reshape(-1)
        counts = np.bincount(inverse, minlength=len(out_coords))
        src_feats = np.zeros((len(out_coords), g.feature_width))
        np.add.at(src_feats, inverse, g.features)
        src_feats /= counts[:, None]
        src_coords = out_coords
    feats = _neighborhood_mean(src_coords, src_feats, out_coords, offsets)
    return SparseGrid(g.dims, stride_out, g.voxel_size, out_coords, feats)


def dilate_coords(coords: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    if len(coords) == 0:
        return coords.reshape(0, offsets.shape[1])
    grown = (coords[:, None, :] + offsets[None, :, :]).reshape(-1, coords.shape[1])
    return _unique_rows(grown)


def cec_expand(g: SparseGrid, kernel: int = 3) -> SparseGrid:
    """Coordinate-expandable convolution.

    The output set is the Minkowski dilation of the input set by the full
    kernel footprint. Input coordinates keep their features; new ones take
    the mean of their active kernel neighbors.
    """
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    offsets = kernel_offsets(g.dims, kernel, g.stride)
    if len(g) == 0:
        return g
    out_coords = dilate_coords(g.coords, offsets)
    index = _CoordIndex(g.coords)
    existing = index.lookup(out_coords)
    feats = np.empty((len(out_coords), g.feature_width))
    old = existing >= 0
    feats[old] = g.features[existing[old]]
    new = ~old
    if new.any():
        feats[new] = _neighborhood_mean(g.coords, g.features, out_coords[new], offsets)
    return SparseGrid(g.dims, g.stride, g.voxel_size, out_coords, feats)


def cec_contract(g: SparseGrid, reference: SparseGrid) -> SparseGrid:
    """Restrict ``g`` to ``reference``'s coordinates (zeros where ``g`` is inactive)."""
    if g.stride != reference.stride:
        raise ValueError(f"stride mismatch: {g.stride} vs reference {reference.stride}")
    if g.dims != reference.dims:
        raise ValueError("dims mismatch")
    idx = _CoordIndex(g.coords).lookup(reference.coords)
    feats = np.zeros((len(reference), g.feature_width))
    hit = idx >= 0
    feats[hit] = g.features[idx[hit]]
    return SparseGrid(g.dims, g.stride, g.voxel_size, reference.coords.copy(), feats)


def _components(units: np.ndarray) -> tuple[int, np.ndarray]:
    n = len(units)
    dims = units.shape[1]
    index = _CoordIndex(units)
    rows, cols = [], []
    half = [o for o in itertools.product((-1, 0, 1), repeat=dims) if o > (0,) * dims]
    for off in np.array(half, dtype=np.int64):
        j = index.lookup(units + off)
        hit = j >= 0
        rows.append(np.nonzero(hit)[0])
        cols.append(j[hit])
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    adj = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    return connected_components(adj, directed=False)


def _nearest_component_gaps(units: np.ndarray, labels: np.ndarray, n_comp: int) -> np.ndarray:
    """Chebyshev distance from each component to its nearest other component.

    Only boundary cells can realize the minimum, and among a cell's ``k``
    nearest neighbors the first foreign one is its exact nearest foreign
    cell; ``k`` grows per component until the bound is tight.
    """
    n, dims = units.shape
    index = _CoordIndex(units)
    interior = np.ones(n, dtype=bool)
    for off in itertools.product((-1, 0, 1), repeat=dims):
        if any(off):
            interior &= index.lookup(units + np.array(off)) >= 0
    cand = np.nonzero(~interior)[0]
    pts = units[cand].astype(float)
    lab = labels[cand]
    tree = cKDTree(pts)
    gaps = np.full(n_comp, np.inf)
    pending = np.arange(n_comp)
    k = min(8, len(cand))
    while len(pending):
        sel = np.nonzero(np.isin(lab, pending))[0]
        d, j = tree.query(pts[sel], k=k, p=np.inf)
        d = d.reshape(len(sel), -1)
        j = j.reshape(len(sel), -1)
        foreign = lab[j] != lab[sel][:, None]
        has = foreign.any(axis=1)
        first = np.where(has, np.argmax(foreign, axis=1), 0)
        found = np.where(has, d[np.arange(len(sel)), first], np.inf)
        bound = np.where(has, np.inf, d[:, -1])
        still = []
        for comp in pending:
            m = lab[sel] == comp
            best = found[m].min()
            if best <= bound[m].min() or k >= len(cand):
                gaps[comp] = best
            else:
                still.append(comp)
        pending = np.array(still, dtype=np.int64)
        k = min(2 * k, len(cand))
    return gaps


def coord_lookup(g: SparseGrid, coords: np.ndarray) -> np.ndarray:
    """Row of each coordinate in ``g`` (-1 when inactive)."""
    return _CoordIndex(g.coords).lookup(np.asarray(coords, dtype=np.int64).reshape(-1, g.dims))


def component_labels(g: SparseGrid) -> tuple[int, np.ndarray]:
    """Component count and per-coordinate labels under Chebyshev adjacency."""
    if len(g) == 0:
        return 0, np.zeros(0, dtype=np.int64)
    n, labels = _components(g.grid_units())
    return int(n), labels


def connectivity(g: SparseGrid) -> ConnectivityReport:
    """Components under Chebyshev adjacency (8-neighborhood in 2D, 26 in 3D)."""
    if len(g) == 0:
        return ConnectivityReport(0, [], 0)
    units = g.grid_units()
    n_comp, labels = _components(units)
    sizes = sorted(np.bincount(labels, minlength=n_comp).tolist(), reverse=True)
    if n_comp == 1:
        return ConnectivityReport(1, sizes, 0)
    gaps = _nearest_component_gaps(units, labels, n_comp)
    return ConnectivityReport(int(n_comp), sizes, int(round(gaps.max())))


def center_cells(boxes: Sequence[BBox], voxel_size: float, stride: int) -> np.ndarray:
    xy = np.array([[b.cx, b.cy] for b in boxes], dtype=float).reshape(-1, 2)
    cells = np.floor(xy / voxel_size).astype(np.int64)
    return downsample_coords(cells, stride)


def center_coverage(g: SparseGrid, boxes: Sequence[BBox]) -> float:
    """Fraction of boxes whose center cell is active in the 2D grid ``g``."""
    if g.dims != 2:
        raise ValueError("center_coverage expects a 2D BEV grid")
    if not boxes:
        return 1.0
    idx = _CoordIndex(g.coords).lookup(center_cells(boxes, g.voxel_size, g.stride))
    return float(np.mean(idx >= 0))


def to_bev(g: SparseGrid) -> SparseGrid:
    """Project a 3D grid onto x, y; features of stacked voxels are averaged."""
    if g.dims == 2:
        return g
    if len(g) == 0:
        return SparseGrid.empty(2, g.stride, g.voxel_size, g.feature_width)
    xy, inverse = unique_coords(g.coords[:, :2], return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(xy))
    feats = np.zeros((len(xy), g.feature_width))
    np.add.at(feats, inverse, g.features)
    return SparseGrid(2, g.stride, g.voxel_size, xy, feats / counts[:, None])


# -- text dump ---------------------------------------------------------------


def dump_grid(g: SparseGrid, precision: int = 6) -> str:
    """One line per coordinate: ``stride c0 c1 [c2] | f0 f1 ...``, lexicographic."""
    s = g.sorted()
    lines = []
    for c, f in zip(s.coords, s.features):
        coord = " ".join(str(int(v)) for v in c)
        feat = " ".join(f"{v:.{precision}g}" for v in f)
        lines.append(f"{s.stride} {coord} | {feat}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")


def parse_grid_dump(text: str, voxel_size: float = DEFAULT_VOXEL_SIZE) -> SparseGrid:
    coords, feats, strides = [], [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            left, right = line.split("|")
            head = [int(v) for v in left.split()]
            feats.append([float(v) for v in right.split()])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: malformed grid dump line {line!r}") from exc
        strides.add(head[0])
        coords.append(head[1:])
    if not coords:
        raise ValueError("empty grid dump carries no stride/dims")
    if len(strides) != 1:
        raise ValueError("grid dump mixes strides")
    return SparseGrid(len(coords[0]), strides.pop(), voxel_size, np.array(coords), np.array(feats))


def sunet_coordinate_schedule(g: SparseGrid, kernel: int = 3, use_cec: bool = True) -> dict[str, SparseGrid]:
    """Coordinate sets through the encoder/decoder stride schedule.

    Stride 1 -> 2 with standard convs, then 4 and 8 where the encoder
    blocks use coordinate expansion; the transposed blocks contract back
    onto the stored stride-4 and stride-2 sets so skip concatenation lines
    up. The BEV head expands twice in 2D at stride 2.
    """
    out: dict[str, SparseGrid] = {"s1": g}
    s2 = conv_coords_standard(g, kernel, 2 * g.stride)
    s4 = conv_coords_standard(s2, kernel, 4 * g.stride)
    if use_cec:
        s4 = cec_expand(s4, kernel)
    s8 = conv_coords_standard(s4, kernel, 8 * g.stride)
    if use_cec:
        s8 = cec_expand(s8, kernel)
    out.update(s2=s2, s4=s4, s8=s8)
    s4_ref = conv_coords_standard(s2, kernel, 4 * g.stride)
    up4 = _upsample_onto(s8, s4_ref)
    up2 = _upsample_onto(up4, s2)
    out.update(p4=up4, p2=up2)
    bev = to_bev(up2)
    out["bev"] = bev
    if use_cec:
        bev = cec_expand(cec_expand(bev, kernel), kernel)
    out["bev_expanded"] = bev
    return out


def _upsample_onto(coarse: SparseGrid, reference: SparseGrid) -> SparseGrid:
    """Transposed conv followed by contraction onto ``reference``'s coordinates."""
    parents = downsample_coords(reference.coords, coarse.stride)
    idx = _CoordIndex(coarse.coords).lookup(parents)
    feats = np.zeros((len(reference), coarse.feature_width))
    hit = idx >= 0
    feats[hit] = coarse.features[idx[hit]]
    up = SparseGrid(reference.dims, reference.stride, reference.voxel_size, reference.coords, feats)
    return cec_contract(up, reference)


def expansions_needed(gap: int, kernel: int = 3) -> int:
    """Smallest number of ``kernel`` expansions that merges two cells ``gap`` apart."""
    r = (kernel - 1) // 2
    return max(0, math.ceil((gap - 1) / (2 * r)))
