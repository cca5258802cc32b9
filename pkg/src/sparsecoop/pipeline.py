"""End-to-end cooperative detection over a simulated scenario.

Every agent runs the same local stage per frame: raw sweep, free-space
augmentation, deskew, query selection, box detection and object tracking,
then broadcasts a message. The ego receives messages through the latency
queue, compensates their age, aligns poses, fuses queries and merges boxes.
Local results do not depend on pose noise or latency, so they are computed
once and shared across sweep points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .augment import fsa_augment
from .cpm import FLAG_MOTION, FLAG_TIME_ALIGNED, Cpm, cpm_size, decode_cpm, encode_cpm, select_cpm
from .detect import DetectorConfig, detect_box_candidates, orient_by_velocity, roi_queries
from .geometry import BBox, Pose, relative_pose, yaw_matrix
from .metrics import MetricRow, average_precision, pose_error
from .pose_align import AlignConfig, AlignmentError, align_agent, pose_graph_optimize
from .sim import (
    Agent,
    ErrorModel,
    EventQueue,
    LatencyModel,
    Scenario,
    agent_pose_at,
    deskew,
    frame_latency,
    ground_truth_at,
    lidar_scan,
    noisy_agent_pose,
    relative_truth,
    visible_counts,
    world_to_agent,
)
from .sparse import center_coverage, component_labels, sunet_coordinate_schedule, voxelize
from .spatial import adapt_rotation, knn_fuse, rotate_motion, snap_to_grid
from .temporal import GATE_RADIUS, MemoryQueue, Query, compensate_latency, estimate_velocity, with_velocity

VARIANTS = ("full", "no_tam", "no_pam")


@dataclass(frozen=True)
class PipelineConfig:
    ego_id: int = 0
    cpm_threshold: float = 0.0
    sorting: str = "global"
    fsa: bool = True
    fsa_spacing: float = 0.5
    top_k: int = 1024
    feature_width: int = 256
    grid_res: float = 0.8
    knn: int = 8
    variants: tuple[str, ...] = VARIANTS
    iou_thresholds: tuple[float, ...] = (0.5, 0.7)
    metrics: tuple[str, ...] = ("bev", "3d")
    eval_start_frame: int = 3
    range_x: tuple[float, float] = (-140.0, 140.0)
    range_y: tuple[float, float] = (-40.0, 40.0)
    min_visible_points: int = 5
    merge_radius: float = 2.0
    size_thresholds: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    grid_report: bool = True
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self) -> None:
        if self.sorting not in ("global", "local"):
            raise ValueError(f"unknown sorting {self.sorting!r}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}")
        if not 0.0 <= self.cpm_threshold <= 1.0:
            raise ValueError("cpm_threshold must lie in [0, 1]")


@dataclass
class LocalFrame:
    agent_id: int
    frame: int
    t_start: float
    t_ref: float
    raw_boxes: list[BBox]
    aligned_boxes: list[BBox]
    raw_queries: list[Query]
    aligned_queries: list[Query]
    visible: np.ndarray
    n_points: int
    n_free: int
    grid: dict | None = None

    def message(self, variant: str, pose: Pose, feature_width: int) -> Cpm:
        if variant == "no_tam":
            return Cpm(self.agent_id, pose, self.t_ref, list(self.raw_queries), list(self.raw_boxes), 0, feature_width)
        flags = FLAG_MOTION | FLAG_TIME_ALIGNED
        return Cpm(self.agent_id, pose, self.t_ref, list(self.aligned_queries), list(self.aligned_boxes), flags, feature_width)


# -- local stage ------------------------------------------------------------------


class ObjectTracker:
    """Track-id association and velocity fitting in a world-stabilized frame.

    Detections may carry several box hypotheses; the tracker keeps the one
    nearest the track's predicted position, so an ambiguous length axis does
    not make the center jump between frames.
    """

    def __init__(self, gate: float = GATE_RADIUS) -> None:
        self.memory = MemoryQueue(top_k=1024)
        self.gate = gate
        self._next_id = 0

    def update(self, boxes_world: Sequence[BBox], t_frame: float) -> np.ndarray:
        """Velocities (world frame) for each box; the memory is then advanced."""
        _, vel = self.update_candidates([[b] for b in boxes_world], t_frame)
        return vel

    def update_candidates(self, objects: Sequence[Sequence[BBox]], t_frame: float) -> tuple[list[int], np.ndarray]:
        """Chosen hypothesis index and world velocity per object."""
        prev = list(self.memory.frames[-1].queries) if self.memory.frames else []
        ids, choice = self._associate(objects, prev, t_frame)
        chosen = [objs[c] for objs, c in zip(objects, choice)]
        queries = [Query(np.zeros(2), b.cx, b.cy, b.score, b.t, tid) for b, tid in zip(chosen, ids)]
        vel = np.array([estimate_velocity(self.memory, q, self.gate) for q in queries]).reshape(-1, 2)
        self.memory.push([with_velocity(q, v) for q, v in zip(queries, vel)], t_frame)
        return choice, vel

    def _associate(self, objects, prev: Sequence[Query], t_frame: float) -> tuple[list[int], list[int]]:
        ids = [-1] * len(objects)
        choice = [0] * len(objects)
        if prev and objects:
            pred = np.array([[q.x + q.feature[0] * (t_frame - q.t), q.y + q.feature[1] * (t_frame - q.t)] for q in prev])
            n_hyp = max(len(o) for o in objects)
            d = np.full((len(objects), len(prev), n_hyp), np.inf)
            for i, objs in enumerate(objects):
                for h, b in enumerate(objs):
                    d[i, :, h] = np.hypot(pred[:, 0] - b.cx, pred[:, 1] - b.cy)
            best_h = d.argmin(axis=2)
            dmin = d.min(axis=2)
            used = set()
            for flat in np.argsort(dmin, axis=None, kind="stable"):
                i, j = divmod(int(flat), len(prev))
                if dmin[i, j] > self.gate:
                    break
                if ids[i] >= 0 or j in used:
                    continue
                ids[i] = prev[j].track_id
                choice[i] = int(best_h[i, j])
                used.add(j)
        for i in range(len(ids)):
            if ids[i] < 0:
                ids[i] = self._next_id
                self._next_id += 1
        return ids, choice


def _assign_query_velocities(queries: Sequence[Query], boxes: Sequence[BBox], vel: np.ndarray, margin: float = 0.6) -> list[Query]:
    if not queries:
        return []
    xy = np.array([[q.x, q.y] for q in queries])
    v_q = np.zeros((len(queries), 2))
    best = np.full(len(queries), np.inf)
    for b, v in zip(boxes, vel):
        grown = replace(b, l=b.l + 2 * margin, w=b.w + 2 * margin)
        inside = grown.contains_xy(xy[:, 0], xy[:, 1])
        d = np.hypot(xy[:, 0] - b.cx, xy[:, 1] - b.cy)
        take = inside & (d < best)
        v_q[take] = v
        best[take] = d[take]
    return [with_velocity(q, v) for q, v in zip(queries, v_q)]


def grid_diagnostics(pc_aug, boxes_local: Sequence[BBox], voxel_size: float = 0.4) -> dict:
    """Sparse-coordinate connectivity and center coverage with and without expansion."""
    g = voxelize(pc_aug, voxel_size, dims=3)
    out: dict = {"n_voxels": len(g)}
    for use_cec in (False, True):
        sched = sunet_coordinate_schedule(g, 3, use_cec)
        tag = "cec" if use_cec else "standard"
        out[tag] = {
            "s4_components": component_labels(sched["s4"])[0],
            "s8_components": component_labels(sched["s8"])[0],
            "bev_cells": len(sched["bev_expanded"]),
            "center_coverage": center_coverage(sched["bev_expanded"], boxes_local),
        }
    return out


def run_local(scene: Scenario, agent: Agent, frame: int, tracker: ObjectTracker, cfg: PipelineConfig) -> LocalFrame:
    t_start = scene.sweep_start(agent, frame)
    t_ref = scene.frame_time(agent, frame)
    h = agent_pose_at(scene, agent, t_ref).z
    raw = lidar_scan(scene, agent, t_start, deskew=False)
    aug = fsa_augment(raw, agent.lidar, cfg.fsa_spacing) if cfg.fsa else raw
    pc = deskew(scene, agent, aug, t_ref)
    solid = pc.subset(~pc.free)

    objects = detect_box_candidates(solid, h, cfg.detector)
    queries = roi_queries(pc, h, cfg.grid_res, cfg.top_k, cfg.feature_width)

    # velocities from the world-stabilized track memory, then back to the local frame
    pose_ref = agent_pose_at(scene, agent, t_ref)
    world = [[b.transformed(pose_ref) for b in objs] for objs in objects]
    choice, vel_w = tracker.update_candidates(world, t_start)
    boxes = [objs[c] for objs, c in zip(objects, choice)]
    c, s = math.cos(-pose_ref.yaw), math.sin(-pose_ref.yaw)
    vel = vel_w @ np.array([[c, s], [-s, c]])
    aligned_boxes = []
    for b, v in zip(boxes, vel):
        dt = t_ref - b.t
        moved = replace(b, cx=b.cx + v[0] * dt, cy=b.cy + v[1] * dt, t=t_ref)
        aligned_boxes.append(orient_by_velocity(moved, v))
    raw_boxes = [orient_by_velocity(b, v) for b, v in zip(boxes, vel)]
    q_vel = _assign_query_velocities(queries, boxes, vel)
    aligned_queries = [
        replace(q, x=q.x + q.feature[0] * (t_ref - q.t), y=q.y + q.feature[1] * (t_ref - q.t), t=t_ref) for q in q_vel
    ]

    grid = None
    if cfg.grid_report and agent.agent_id == cfg.ego_id:
        gt_local = world_to_agent(scene, agent, t_ref, ground_truth_at(scene, t_ref, exclude=_own(agent)))
        counts = visible_counts(raw.labels, len(scene.vehicles))
        vis_gt = [b for k, b in _indexed_gt(scene, agent, gt_local) if counts[k] >= cfg.min_visible_points]
        grid = grid_diagnostics(pc, vis_gt)
        grid["fsa_points"] = int(pc.free.sum())
        grid["without_fsa"] = grid_diagnostics(solid, vis_gt)

    return LocalFrame(
        agent.agent_id,
        frame,
        t_start,
        t_ref,
        raw_boxes,
        aligned_boxes,
        queries,
        aligned_queries,
        visible_counts(raw.labels, len(scene.vehicles)),
        len(raw),
        int(pc.free.sum()),
        grid,
    )


def _own(agent: Agent) -> tuple[int, ...]:
    return () if agent.vehicle is None else (agent.vehicle,)


def _indexed_gt(scene: Scenario, agent: Agent, boxes: Sequence[BBox]):
    idx = [k for k in range(len(scene.vehicles)) if k not in _own(agent)]
    return list(zip(idx, boxes))


def run_local_all(scene: Scenario, cfg: PipelineConfig, agent_ids: Sequence[int] | None = None) -> dict[tuple[int, int], LocalFrame]:
    """Local stage for every (agent, frame); trackers run in frame order per agent."""
    out = {}
    for agent in scene.agents:
        if agent_ids is not None and agent.agent_id not in agent_ids:
            continue
        tracker = ObjectTracker()
        for k in range(scene.n_frames):
            out[(agent.agent_id, k)] = run_local(scene, agent, k, tracker, cfg)
    return out


# -- ego stage ----------------------------------------------------------------------


@dataclass
class FusedFrame:
    frame: int
    t: float
    boxes: list[BBox]
    queries: list[Query]
    pose_errors: list[tuple[float, float]]
    used: dict[int, float]  # coop id -> message time


def merge_boxes(boxes: Sequence[BBox], radius: float) -> list[BBox]:
    """Greedy clustering by center distance; members vote on the center."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    taken = [False] * len(boxes)
    out = []
    for i in order:
        if taken[i]:
            continue
        top = boxes[i]
        group = []
        for j in order:
            if taken[j]:
                continue
            b = boxes[j]
            if math.hypot(b.cx - top.cx, b.cy - top.cy) <= radius:
                group.append(b)
                taken[j] = True
        w = np.array([b.score for b in group])
        w = w / w.sum() if w.sum() > 0 else np.full(len(group), 1.0 / len(group))
        cx = float(sum(wi * b.cx for wi, b in zip(w, group)))
        cy = float(sum(wi * b.cy for wi, b in zip(w, group)))
        score = 1.0 - float(np.prod([1.0 - b.score for b in group]))
        out.append(replace(top, cx=cx, cy=cy, score=min(score, 1.0)))
    return out


def rescore_with_queries(boxes: Sequence[BBox], queries: Sequence[Query]) -> list[BBox]:
    """Blend each box score with the best fused query score under its footprint."""
    if not queries:
        return list(boxes)
    xy = np.array([[q.x, q.y] for q in queries])
    sc = np.array([q.score for q in queries])
    out = []
    for b in boxes:
        inside = b.contains_xy(xy[:, 0], xy[:, 1])
        qs = float(sc[inside].max()) if inside.any() else 0.0
        out.append(replace(b, score=0.5 * b.score + 0.5 * qs))
    return out


def transform_queries(queries: Sequence[Query], T: Pose, grid_res: float) -> list[Query]:
    if not queries:
        return []
    moved = rotate_motion(queries, T.yaw)
    feats = adapt_rotation(np.stack([q.feature for q in moved]), yaw_matrix(T.yaw))
    moved = [replace(q, feature=f) for q, f in zip(moved, feats)]
    return snap_to_grid(moved, T, grid_res)


def in_range(b: BBox, cfg: PipelineConfig) -> bool:
    return cfg.range_x[0] <= b.cx <= cfg.range_x[1] and cfg.range_y[0] <= b.cy <= cfg.range_y[1]


def _compensate(msg: Cpm, t_now: float, variant: str) -> tuple[list[Query], list[BBox]]:
    if variant == "no_tam":
        return list(msg.queries), list(msg.boxes)
    return compensate_latency(msg.queries, msg.boxes, msg.t, t_now)


def fuse_ego_frame(
    scene: Scenario,
    ego_local: LocalFrame,
    messages: dict[int, Cpm],
    ego_noisy: Pose,
    variant: str,
    cfg: PipelineConfig,
) -> FusedFrame:
    ego = scene.agent(cfg.ego_id)
    t_now = ego_local.t_ref
    ego_boxes = ego_local.raw_boxes if variant == "no_tam" else ego_local.aligned_boxes
    ego_queries = ego_local.raw_queries if variant == "no_tam" else ego_local.aligned_queries
    coop_ids = sorted(messages)
    comp = {cid: _compensate(messages[cid], t_now, variant) for cid in coop_ids}
    estimates: dict[int, Pose] = {}
    confident: dict[int, bool] = {}
    for cid in coop_ids:
        prior = relative_pose(ego_noisy, messages[cid].pose)
        if variant == "no_pam":
            estimates[cid], confident[cid] = prior, False
        else:
            res = align_agent(ego_boxes, comp[cid][1], prior, cfg.align)
            estimates[cid], confident[cid] = res.pose, not res.low_confidence
    if variant != "no_pam" and len(coop_ids) >= 2:
        estimates = _refine_with_graph(coop_ids, estimates, confident, comp, cfg)

    all_boxes = list(ego_boxes)
    coop_queries: list[Query] = []
    errors = []
    for cid in coop_ids:
        T = estimates[cid]
        truth = relative_truth(scene, ego, t_now, scene.agent(cid), messages[cid].t)
        errors.append(pose_error(T, truth))
        all_boxes.extend(b.transformed(T) for b in comp[cid][1])
        coop_queries.extend(transform_queries(comp[cid][0], T, cfg.grid_res))
    fused_q = knn_fuse(ego_queries, coop_queries, cfg.knn, cfg.grid_res) if (ego_queries or coop_queries) else []
    merged = merge_boxes(all_boxes, cfg.merge_radius)
    final = [b for b in rescore_with_queries(merged, fused_q) if in_range(b, cfg)]
    return FusedFrame(ego_local.frame, t_now, final, fused_q, errors, {c: messages[c].t for c in coop_ids})


def _refine_with_graph(coop_ids, estimates, confident, comp, cfg: PipelineConfig) -> dict[int, Pose]:
    nodes = [Pose()] + [estimates[c] for c in coop_ids]
    edges = []
    for n, cid in enumerate(coop_ids, start=1):
        edges.append((0, n, estimates[cid], 1.0 if confident[cid] else 1e-2))
    for a in range(len(coop_ids)):
        for b in range(a + 1, len(coop_ids)):
            ca, cb = coop_ids[a], coop_ids[b]
            if not (confident[ca] and confident[cb]):
                continue
            prior = relative_pose(estimates[ca], estimates[cb])
            res = align_agent(comp[ca][1], comp[cb][1], prior, cfg.align)
            if not res.low_confidence:
                edges.append((a + 1, b + 1, res.pose, 1.0))
    try:
        opt = pose_graph_optimize(nodes, edges)
    except AlignmentError:
        return estimates
    return {cid: opt[n] for n, cid in enumerate(coop_ids, start=1)}


# -- evaluation -------------------------------------------------------------------


@dataclass
class SweepPoint:
    epsilon: float
    latency_ms: float | tuple[float, float]

    @property
    def latency_label(self) -> float:
        lat = self.latency_ms
        return float(lat if not isinstance(lat, tuple) else lat[1])


def ego_ground_truth(scene: Scenario, local: dict, frame: int, cfg: PipelineConfig) -> list[BBox]:
    """Vehicles hit by enough returns from any agent's sweep of this frame, in the ego frame."""
    ego = scene.agent(cfg.ego_id)
    t = local[(cfg.ego_id, frame)].t_ref
    counts = sum(local[(a.agent_id, frame)].visible for a in scene.agents)
    boxes = world_to_agent(scene, ego, t, ground_truth_at(scene, t, exclude=_own(ego)))
    return [b for k, b in _indexed_gt(scene, ego, boxes) if counts[k] >= cfg.min_visible_points and in_range(b, cfg)]


def run_point(
    scene: Scenario, local: dict, point: SweepPoint, cfg: PipelineConfig, experiment: str
) -> list[MetricRow]:
    """Fuse and evaluate every variant at one (epsilon, latency) point."""
    em = ErrorModel(point.epsilon)
    lat = point.latency_ms
    lm = LatencyModel(*lat) if isinstance(lat, tuple) else LatencyModel(lat, lat)
    ego = scene.agent(cfg.ego_id)
    coops = [a for a in scene.agents if a.agent_id != cfg.ego_id]
    rows: list[MetricRow] = []
    wire: dict[tuple[int, int, str], Cpm] = {}

    for variant in cfg.variants:
        queue = EventQueue()
        for a in coops:
            for k in range(scene.n_frames):
                lf = local[(a.agent_id, k)]
                key = (a.agent_id, k, variant)
                if key not in wire:
                    msg = select_cpm(lf.message(variant, Pose(), cfg.feature_width), cfg.cpm_threshold)
                    wire[key] = decode_cpm(encode_cpm(msg))
                pose = noisy_agent_pose(scene, a, k, lf.t_ref, em)
                queue.push(replace(wire[key], pose=pose), lf.t_ref, frame_latency(scene, a, k, lm))
        latest: dict[int, Cpm] = {}
        frames, errors = [], []
        for k in range(scene.n_frames):
            ego_local = local[(cfg.ego_id, k)]
            for ev in queue.pop_ready(ego_local.t_ref):
                c = ev.message
                if c.agent_id not in latest or c.t > latest[c.agent_id].t:
                    latest[c.agent_id] = c
            if k < cfg.eval_start_frame:
                continue
            ego_noisy = noisy_agent_pose(scene, ego, k, ego_local.t_ref, em)
            fused = fuse_ego_frame(scene, ego_local, dict(latest), ego_noisy, variant, cfg)
            frames.append((fused.boxes, ego_ground_truth(scene, local, k, cfg)))
            errors.extend(fused.pose_errors)
        n_gt = sum(len(g) for _, g in frames)
        te = float(np.median([e[0] for e in errors])) if errors else math.nan
        re = float(np.median([e[1] for e in errors])) if errors else math.nan
        for metric in cfg.metrics:
            for thr in cfg.iou_thresholds:
                ap = average_precision(frames, thr, cfg.sorting, metric) if n_gt else math.nan
                rows.append(
                    MetricRow(experiment, variant, point.epsilon, point.latency_label, thr, metric, cfg.sorting, ap, te, re, len(frames), n_gt)
                )
    return rows


def cpm_size_rows(scene: Scenario, local: dict, cfg: PipelineConfig, experiment: str) -> list[dict]:
    """Message size per coop frame at the run threshold and the reporting thresholds."""
    thresholds = sorted(set(cfg.size_thresholds) | {cfg.cpm_threshold})
    rows = []
    for a in scene.agents:
        for k in range(scene.n_frames):
            lf = local[(a.agent_id, k)]
            full = lf.message("full", Pose(), cfg.feature_width)
            for thr in thresholds:
                c = select_cpm(full, thr)
                rows.append(
                    {
                        "experiment": experiment,
                        "agent_id": a.agent_id,
                        "frame": k,
                        "threshold": thr,
                        "n_queries": len(c.queries),
                        "n_boxes": len(c.boxes),
                        "size_bytes": cpm_size(c),
                    }
                )
    return rows
