"""Non-learned stand-ins for the query head and the box detector.

``roi_queries`` scores BEV cells by point density and keeps the top ``K`` as
object queries. ``detect_boxes`` clusters elevated returns and fits an
oriented rectangle to each cluster. Both are plug-in points: any callable
with the same signature can replace them in the pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import BBox, TimedPointCloud, rot2, wrap_angle
from .sparse import cec_expand, component_labels, coord_lookup, unique_coords, voxelize
from .spatial import DEFAULT_GRID_RES, ROTATION_SLOTS
from .temporal import DEFAULT_FEATURE_WIDTH, Query

DEFAULT_TOP_K = 1024
ELEVATION_MARGIN = 0.25  # returns this far above the ground count as objects


@dataclass(frozen=True)
class DetectorConfig:
    cluster_voxel: float = 0.4
    min_points: int = 8
    max_extent: float = 8.0
    prior_length: float = 4.5
    prior_width: float = 1.9
    heading_step_deg: float = 1.0
    score_scale: float = 25.0


def elevated_mask(pc: TimedPointCloud, sensor_height: float) -> np.ndarray:
    z = pc.points[:, 2]
    return (~pc.free) & (z > -sensor_height + ELEVATION_MARGIN)


def roi_queries(
    pc: TimedPointCloud,
    sensor_height: float,
    grid_res: float = DEFAULT_GRID_RES,
    top_k: int = DEFAULT_TOP_K,
    feature_width: int = DEFAULT_FEATURE_WIDTH,
) -> list[Query]:
    """Density-scored BEV cells centered on the query grid nodes.

    Score grows with elevated returns and, much more weakly, with ground and
    free-space returns, so empty road still ranks below any object surface.
    Query time is the mean point time of the cell.
    """
    if feature_width < ROTATION_SLOTS + 8:
        raise ValueError("feature width too small for the query layout")
    if len(pc) == 0:
        return []
    node = np.floor(pc.points[:, :2] / grid_res + 0.5).astype(np.int64)
    keys, inverse = unique_coords(node, return_inverse=True)
    n = len(keys)
    elev = elevated_mask(pc, sensor_height)
    free = pc.free
    ground = ~elev & ~free
    height = pc.points[:, 2] + sensor_height
    n_elev = np.bincount(inverse, weights=elev, minlength=n)
    n_ground = np.bincount(inverse, weights=ground, minlength=n)
    n_free = np.bincount(inverse, weights=free, minlength=n)
    n_all = np.bincount(inverse, minlength=n)
    t_mean = np.bincount(inverse, weights=pc.points[:, 3], minlength=n) / n_all
    h_sum = np.bincount(inverse, weights=np.where(elev, height, 0.0), minlength=n)
    h_max = np.zeros(n)
    np.maximum.at(h_max, inverse, np.where(elev, height, 0.0))
    t_min = np.full(n, np.inf)
    t_max = np.full(n, -np.inf)
    np.minimum.at(t_min, inverse, pc.points[:, 3])
    np.maximum.at(t_max, inverse, pc.points[:, 3])
    score = 1.0 - np.exp(-(n_elev + 0.02 * n_ground + 0.01 * n_free) / 6.0)

    feats = np.zeros((n, feature_width))
    # slots 0, 1 stay free for velocity
    feats[:, 2] = n_elev / (n_elev + 10.0)
    feats[:, 3] = n_ground / (n_ground + 10.0)
    feats[:, 4] = n_free / (n_free + 10.0)
    feats[:, 5] = np.divide(h_sum, n_elev, out=np.zeros(n), where=n_elev > 0) / 3.0
    feats[:, 6] = h_max / 3.0
    feats[:, 7] = (t_max - t_min) * 10.0
    feats[:, -ROTATION_SLOTS:] = np.eye(3).reshape(-1)
    xy = keys * grid_res
    # same order top_k_queries would give: score descending, then cell order
    keep = np.argsort(-score, kind="stable")[:top_k]
    return [Query(feats[i], float(xy[i, 0]), float(xy[i, 1]), float(score[i]), float(t_mean[i])) for i in keep]


def cluster_points(xy: np.ndarray, voxel: float) -> np.ndarray:
    """Cluster labels for 2D points: occupied cells joined across one-cell gaps."""
    if len(xy) == 0:
        return np.zeros(0, dtype=np.int64)
    pc = TimedPointCloud(np.column_stack([xy, np.zeros((len(xy), 2))]))
    g = voxelize(pc, voxel, dims=2)
    grown = cec_expand(g)
    _, labels = component_labels(grown)
    cell = np.floor(xy / voxel).astype(np.int64)
    return labels[coord_lookup(grown, cell)]


def _closeness(e1: np.ndarray, e2: np.ndarray, d0: float = 0.01) -> np.ndarray:
    d1 = np.minimum(e1.max(axis=1, keepdims=True) - e1, e1 - e1.min(axis=1, keepdims=True))
    d2 = np.minimum(e2.max(axis=1, keepdims=True) - e2, e2 - e2.min(axis=1, keepdims=True))
    return np.sum(1.0 / np.maximum(np.minimum(d1, d2), d0), axis=1)


def fit_box_candidates(points: np.ndarray, sensor_height: float, cfg: DetectorConfig = DetectorConfig()) -> list[BBox]:
    """Oriented rectangles over a cluster of (N, 4) sensor-frame points, best first.

    Heading search maximizes edge closeness (L-shape fitting). Sides
    shorter than the class prior are grown away from the sensor, since the
    near faces are the observed ones. When no observed side is longer than
    a vehicle is wide, the length axis is ambiguous and the swapped
    hypothesis is returned second.
    """
    xy = points[:, :2]
    thetas = np.deg2rad(np.arange(0.0, 90.0, cfg.heading_step_deg))
    c, s = np.cos(thetas)[:, None], np.sin(thetas)[:, None]
    e1 = c * xy[:, 0] + s * xy[:, 1]
    e2 = -s * xy[:, 0] + c * xy[:, 1]
    theta = float(thetas[int(np.argmax(_closeness(e1, e2)))])

    R = rot2(theta)
    local = xy @ R  # columns: along theta, along theta + 90deg
    lo, hi = local.min(axis=0), local.max(axis=0)
    ext = hi - lo
    if ext.max() > cfg.max_extent:
        return []
    long_side = cfg.prior_width + 0.7
    if min(ext) < 0.4:
        # one face seen: long faces are sides, short ones are front/rear
        visible = int(np.argmax(ext))
        along = visible if ext[visible] > long_side else 1 - visible
    else:
        along = int(np.argmax(ext))
    options = [along] if ext.max() > long_side else [along, 1 - along]
    top = float(points[:, 2].max()) + sensor_height
    score = float(1.0 - math.exp(-len(points) / cfg.score_scale))
    t_mean = float(points[:, 3].mean())
    out = []
    for ax_len in options:
        priors = np.empty(2)
        priors[ax_len] = cfg.prior_length
        priors[1 - ax_len] = cfg.prior_width
        blo, bhi = lo.copy(), hi.copy()
        for ax in range(2):
            if ext[ax] < priors[ax]:
                # the sensor sits at the origin of the rotated frame
                if abs(blo[ax]) <= abs(bhi[ax]):
                    bhi[ax] = blo[ax] + priors[ax]
                else:
                    blo[ax] = bhi[ax] - priors[ax]
        center = R @ ((blo + bhi) / 2)
        dims = bhi - blo
        yaw = canonical_heading(theta + (math.pi / 2 if ax_len == 1 else 0.0))
        out.append(
            BBox(float(center[0]), float(center[1]), -sensor_height + top / 2, float(dims[ax_len]), float(dims[1 - ax_len]), top, yaw, score, t_mean)
        )
    return out


def fit_box(points: np.ndarray, sensor_height: float, cfg: DetectorConfig = DetectorConfig()) -> BBox | None:
    cands = fit_box_candidates(points, sensor_height, cfg)
    return cands[0] if cands else None


def canonical_heading(yaw: float) -> float:
    """Fold an undirected heading into [-pi/2, pi/2)."""
    y = wrap_angle(yaw)
    if y >= math.pi / 2:
        y -= math.pi
    elif y < -math.pi / 2:
        y += math.pi
    return y


def orient_by_velocity(box: BBox, v: Sequence[float], min_speed: float = 1.0) -> BBox:
    """Flip an undirected heading to face the direction of travel."""
    vx, vy = float(v[0]), float(v[1])
    if math.hypot(vx, vy) < min_speed:
        return box
    if math.cos(box.yaw) * vx + math.sin(box.yaw) * vy < 0:
        return replace(box, yaw=wrap_angle(box.yaw + math.pi))
    return box


def detect_box_candidates(pc: TimedPointCloud, sensor_height: float, cfg: DetectorConfig = DetectorConfig()) -> list[list[BBox]]:
    """Per-object box hypotheses in the point cloud's frame, objects by descending score."""
    mask = elevated_mask(pc, sensor_height)
    pts = pc.points[mask]
    if len(pts) < cfg.min_points:
        return []
    labels = cluster_points(pts[:, :2], cfg.cluster_voxel)
    objects = []
    for lab in np.unique(labels):
        member = pts[labels == lab]
        if len(member) < cfg.min_points:
            continue
        cands = fit_box_candidates(member, sensor_height, cfg)
        if cands:
            objects.append(cands)
    objects.sort(key=lambda c: (-c[0].score, c[0].cx, c[0].cy))
    return objects


def detect_boxes(pc: TimedPointCloud, sensor_height: float, cfg: DetectorConfig = DetectorConfig()) -> list[BBox]:
    """Best box per object, ordered by descending score."""
    return [c[0] for c in detect_box_candidates(pc, sensor_height, cfg)]
