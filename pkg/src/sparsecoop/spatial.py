"""Fusion of cooperative queries into the ego frame.

Cooperative queries are rotated into the ego frame, snapped to the ego query
grid and merged with the ego queries: every output node pools transformed
features of its ``k`` nearest neighbors with ``max + mean``.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose
from .temporal import Query

ROTATION_SLOTS = 9
DEFAULT_GRID_RES = 0.8

NeighborTransform = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
RotationAdapter = Callable[[np.ndarray, np.ndarray], np.ndarray]


class RotationError(ValueError):
    pass


def append_rotation_suffix(features: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Default adapter: keep features, write ``R`` row-major into the last 9 slots."""
    out = np.array(features, dtype=float, copy=True)
    out[..., -ROTATION_SLOTS:] = R.reshape(-1)
    return out


def adapt_rotation(features: np.ndarray, R: np.ndarray, adapter: RotationAdapter = append_rotation_suffix) -> np.ndarray:
    """Condition (N, W) query features on the frame rotation ``R``."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise RotationError("R must be 3x3")
    if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-6:
        raise RotationError("R is not orthonormal")
    features = np.asarray(features, dtype=float)
    if features.shape[-1] < ROTATION_SLOTS:
        raise RotationError(f"feature width must be at least {ROTATION_SLOTS}")
    out = adapter(features, R)
    if out.shape != features.shape:
        raise RotationError("rotation adapter changed the feature shape")
    return out


def round_half_up(v: np.ndarray | float, res: float):
    return np.floor(np.asarray(v, dtype=float) / res + 0.5) * res


def snap_to_grid(coop_queries: Sequence[Query], T_c_e: Pose, grid_res: float = DEFAULT_GRID_RES) -> list[Query]:
    if grid_res <= 0:
        raise ValueError("grid_res must be positive")
    if not coop_queries:
        return []
    xy = np.array([[q.x, q.y] for q in coop_queries])
    moved = T_c_e.apply(xy)
    snapped = round_half_up(moved, grid_res)
    return [replace(q, x=float(p[0]), y=float(p[1])) for q, p in zip(coop_queries, snapped)]


def rotate_motion(queries: Sequence[Query], yaw: float) -> list[Query]:
    """Rotate the velocity slots of queries by ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    out = []
    for q in queries:
        f = q.feature.copy()
        vx, vy = f[0], f[1]
        f[0], f[1] = c * vx - s * vy, s * vx + c * vy
        out.append(replace(q, feature=f))
    return out


def inverse_distance_transform(feature: np.ndarray, delta: np.ndarray, grid_res: float) -> np.ndarray:
    """Default neighbor transform: scale by 1 / (1 + |delta| / grid_res)."""
    dist = np.hypot(delta[..., 0], delta[..., 1])
    return feature / (1.0 + dist / grid_res)[..., None]


def knn_fuse(
    ego_q: Sequence[Query],
    coop_q: Sequence[Query],
    k: int = 8,
    grid_res: float = DEFAULT_GRID_RES,
    transform: NeighborTransform = inverse_distance_transform,
    normalize: bool = True,
) -> list[Query]:
    """Fuse ego and (already snapped) cooperative queries.

    Output nodes are the deduplicated union of positions; each pools its
    ``k`` nearest neighbors from the full union with ``max + mean`` (halved
    when ``normalize`` so a lone query maps onto itself). Score is the max
    neighbor score, time the score-weighted mean neighbor time.
    """
    if not ego_q and not coop_q:
        raise ValueError("nothing to fuse")
    if not coop_q:
        return list(ego_q)
    union = list(ego_q) + list(coop_q)
    xy = np.array([[q.x, q.y] for q in union])
    feats = np.stack([q.feature for q in union])
    scores = np.array([q.score for q in union])
    times = np.array([q.t for q in union])

    # dedupe coincident nodes, keeping the highest-score representative
    key = np.round(xy / grid_res * 1e6).astype(np.int64)
    order = sorted(range(len(union)), key=lambda i: (-scores[i], i))
    seen: dict[tuple[int, int], int] = {}
    for i in order:
        kk = (int(key[i, 0]), int(key[i, 1]))
        if kk not in seen:
            seen[kk] = i
    reps = sorted(seen.values())
    nodes = xy[reps]

    kq = min(k, len(union))
    tree = cKDTree(xy)
    # over-fetch so distance ties can be broken by index deterministically
    extra = min(len(union), kq + 8)
    d, j = tree.query(nodes, k=extra)
    d = d.reshape(len(nodes), -1)
    j = j.reshape(len(nodes), -1)
    sel = np.lexsort((j, d), axis=-1)[:, :kq]
    nb = np.take_along_axis(j, sel, axis=1)
    delta = nodes[:, None, :] - xy[nb]
    f = transform(feats[nb], delta, grid_res)
    fused = f.max(axis=1) + f.mean(axis=1)
    if normalize:
        fused = fused / 2.0
    s = scores[nb]
    t_nb = times[nb]
    wsum = s.sum(axis=1)
    t = np.where(wsum > 0, (t_nb * s).sum(axis=1) / np.where(wsum > 0, wsum, 1.0), t_nb.mean(axis=1))
    smax = s.max(axis=1)
    return [
        replace(union[i], feature=fused[row], x=float(nodes[row, 0]), y=float(nodes[row, 1]), score=float(smax[row]), t=float(t[row]))
        for row, i in enumerate(reps)
    ]


def self_only_fuse(ego_q: Sequence[Query], coop_q: Sequence[Query], grid_res: float = DEFAULT_GRID_RES) -> list[Query]:
    """Rotation-only comparison fusion: every node keeps just itself (k = 1)."""
    return knn_fuse(ego_q, coop_q, k=1, grid_res=grid_res)
