"""Relative-pose recovery from detected boxes.

Each box gets a descriptor pooled from pose-agnostic relations to its
nearest neighbors (distance, bearing and heading relative to the box's own
heading, neighbor dimensions). Descriptors of two box sets are matched with
the Hungarian algorithm, far matches are rejected, and the survivors give a
rigid SE(2) fit. Several pairwise estimates can be reconciled with pose-graph
optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import BBox, Pose, compose_pose, invert_pose, wrap_angle

FEATURE_WIDTH = 8
DESCRIPTOR_WIDTH = 2 * FEATURE_WIDTH


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignConfig:
    k: int = 8
    dist_normalizer: float = 1.0
    reject_threshold: float = 3.0
    # detector headings are undirected, so compare angles modulo pi
    axial: bool = True
    min_pairs: int = 2
    # geometric verification after descriptor matching
    candidates_per_box: int = 8
    inlier_radius: float = 1.5
    heading_tolerance_deg: float = 20.0
    min_inliers: int = 3
    refine_iterations: int = 5
    # corrections further than this from the prior are treated as failures
    max_prior_translation: float = 5.0
    max_prior_rotation_deg: float = 15.0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    rejected: list[tuple[int, int]] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)
    rejected_cost: list[float] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MatchResult):
            return NotImplemented
        return (
            self.pairs == other.pairs
            and self.rejected == other.rejected
            and np.array_equal(self.cost, other.cost)
            and np.array_equal(self.rejected_cost, other.rejected_cost)
        )


@dataclass(frozen=True)
class AlignmentResult:
    pose: Pose
    low_confidence: bool
    match: MatchResult
    inliers: list[tuple[int, int]]


def neighbor_features(boxes: Sequence[BBox], k: int = 8, dist_normalizer: float = 1.0, axial: bool = False) -> np.ndarray:
    """(N, k, 8) neighbor relations ordered by distance, zero-padded.

    Per neighbor: distance, sin/cos of bearing minus own heading, sin/cos of
    neighbor heading minus own heading, neighbor l, w, h. With ``axial`` the
    angles are doubled so headings known only up to pi give the same features.
    """
    n = len(boxes)
    if n < 2:
        raise ValueError("need at least two boxes to form a neighborhood")
    xy = np.array([[b.cx, b.cy] for b in boxes])
    yaw = np.array([b.yaw for b in boxes])
    dims = np.array([[b.l, b.w, b.h] for b in boxes])
    diff = xy[None, :, :] - xy[:, None, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    out = np.zeros((n, k, FEATURE_WIDTH))
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # stable: ties resolved by lower index
        order = others[np.argsort(dist[i, others], kind="stable")][:k]
        m = len(order)
        bearing = np.arctan2(diff[i, order, 1], diff[i, order, 0]) - yaw[i]
        rel_heading = yaw[order] - yaw[i]
        if axial:
            bearing, rel_heading = 2 * bearing, 2 * rel_heading
        out[i, :m, 0] = dist[i, order] / dist_normalizer
        out[i, :m, 1] = np.sin(bearing)
        out[i, :m, 2] = np.cos(bearing)
        out[i, :m, 3] = np.sin(rel_heading)
        out[i, :m, 4] = np.cos(rel_heading)
        out[i, :m, 5:8] = dims[order]
    return out


def build_descriptors(boxes: Sequence[BBox], k: int = 8, dist_normalizer: float = 1.0, axial: bool = False) -> np.ndarray:
    """(N, 16) descriptors: componentwise mean then max over the real (unpadded) neighbors."""
    f = neighbor_features(boxes, k, dist_normalizer, axial)
    m = min(k, len(boxes) - 1)
    f = f[:, :m]
    return np.concatenate([f.mean(axis=1), f.max(axis=1)], axis=1)


def assign(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment on a (possibly rectangular) cost matrix."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def match_boxes(da: np.ndarray, db: np.ndarray, reject_threshold: float = 3.0) -> MatchResult:
    da = np.asarray(da, dtype=float)
    db = np.asarray(db, dtype=float)
    if len(da) == 0 or len(db) == 0:
        raise ValueError("both descriptor lists must be non-empty")
    cost = np.linalg.norm(da[:, None, :] - db[None, :, :], axis=2)
    return match_cost_matrix(cost, reject_threshold)


def match_cost_matrix(cost: np.ndarray, reject_threshold: float) -> MatchResult:
    res = MatchResult()
    for i, j in assign(cost):
        c = float(cost[i, j])
        if c > reject_threshold:
            res.rejected.append((i, j))
            res.rejected_cost.append(c)
        else:
            res.pairs.append((i, j))
            res.cost.append(c)
    return res


def estimate_se2(pairs: Sequence[tuple[BBox, BBox]]) -> Pose:
    """Rigid transform mapping the second box of each pair onto the first.

    Two or more pairs: 2D Kabsch on centers. One pair, or coincident centers:
    the heading difference gives the rotation.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    dst = np.array([[a.cx, a.cy] for a, _ in pairs])
    src = np.array([[b.cx, b.cy] for _, b in pairs])
    dz = float(np.mean([a.cz - b.cz for a, b in pairs]))
    cd, cs = dst.mean(axis=0), src.mean(axis=0)
    p, q = src - cs, dst - cd
    if len(pairs) >= 2 and np.sum(p * p) > 1e-12:
        cross = float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]))
        dot = float(np.sum(p[:, 0] * q[:, 0] + p[:, 1] * q[:, 1]))
        yaw = math.atan2(cross, dot)
    else:
        d = np.array([a.yaw - b.yaw for a, b in pairs])
        yaw = math.atan2(np.sin(d).sum(), np.cos(d).sum())
    c, s = math.cos(yaw), math.sin(yaw)
    tx = cd[0] - (c * cs[0] - s * cs[1])
    ty = cd[1] - (s * cs[0] + c * cs[1])
    return Pose(tx, ty, dz, yaw)


# -- pose graph ---------------------------------------------------------------


Edge = tuple[int, int, Pose, float]


def _edge_residual(pi: Pose, pj: Pose, z: Pose) -> np.ndarray:
    pred = compose_pose(invert_pose(pi), pj)
    return np.array([pred.x - z.x, pred.y - z.y, wrap_angle(pred.yaw - z.yaw)])


def graph_cost(poses: Sequence[Pose], edges: Sequence[Edge]) -> float:
    """Total weighted squared residual over the planar components."""
    total = 0.0
    for i, j, z, w in edges:
        r = _edge_residual(poses[i], poses[j], z)
        total += w * float(r @ r)
    return total


def _check_connected(n: int, edges: Sequence[Edge]) -> None:
    if n <= 1:
        return
    r = [e[0] for e in edges]
    c = [e[1] for e in edges]
    adj = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise AlignmentError(f"pose graph is disconnected ({n_comp} components)")


def _linearize(x: np.ndarray, edges: Sequence[Edge], n: int) -> tuple[np.ndarray, np.ndarray, float]:
    H = np.zeros((3 * n, 3 * n))
    b = np.zeros(3 * n)
    cost = 0.0
    for i, j, z, w in edges:
        xi, yi, ti = x[3 * i : 3 * i + 3]
        xj, yj, tj = x[3 * j : 3 * j + 3]
        c, s = math.cos(ti), math.sin(ti)
        dx, dy = xj - xi, yj - yi
        r = np.array([c * dx + s * dy - z.x, -s * dx + c * dy - z.y, wrap_angle(tj - ti - z.yaw)])
        A = np.array([[-c, -s, -s * dx + c * dy], [s, -c, -c * dx - s * dy], [0.0, 0.0, -1.0]])
        B = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        si, sj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
        H[si, si] += w * A.T @ A
        H[si, sj] += w * A.T @ B
        H[sj, si] += w * B.T @ A
        H[sj, sj] += w * B.T @ B
        b[si] += w * A.T @ r
        b[sj] += w * B.T @ r
        cost += w * float(r @ r)
    return H, b, cost


def _planar_cost(x: np.ndarray, edges: Sequence[Edge]) -> float:
    poses = [Pose(x[3 * k], x[3 * k + 1], 0.0, x[3 * k + 2]) for k in range(len(x) // 3)]
    return graph_cost(poses, edges)


def pose_graph_optimize(
    poses: Sequence[Pose],
    edges: Sequence[Edge],
    max_iterations: int = 50,
    tol: float = 1e-9,
    max_damping_steps: int = 5,
) -> list[Pose]:
    """Gauss-Newton over (x, y, yaw) with node 0 fixed as gauge.

    A step is only accepted if it lowers the cost; otherwise damping grows
    tenfold (Levenberg style). Heights are solved separately as a linear
    weighted least-squares problem over the same edges.
    """
    n = len(poses)
    if n == 0:
        return []
    for i, j, _, w in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise AlignmentError(f"edge ({i}, {j}) references a missing node")
        if w <= 0:
            raise AlignmentError("edge weights must be positive")
    _check_connected(n, edges)
    x = np.array([v for p in poses for v in (p.x, p.y, p.yaw)], dtype=float)
    free = np.arange(3, 3 * n)
    lam = 0.0
    for _ in range(max_iterations):
        H, b, cost = _linearize(x, edges, n)
        Hf = H[np.ix_(free, free)]
        bf = b[free]
        accepted = False
        escalations = 0
        while True:
            try:
                A = Hf + lam * np.diag(np.maximum(np.diag(Hf), 1e-12)) if lam > 0 else Hf
                step = np.linalg.solve(A, -bf)
                if not np.all(np.isfinite(step)):
                    raise np.linalg.LinAlgError("non-finite step")
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                cand = x.copy()
                cand[free] += step
                cand[2::3] = [wrap_angle(v) for v in cand[2::3]]
                new_cost = _planar_cost(cand, edges)
                if new_cost <= cost:
                    x = cand
                    accepted = True
                    lam = lam / 10 if lam > 1e-12 else 0.0
                    break
            escalations += 1
            if escalations > max_damping_steps:
                break
            lam = 1e-6 if lam == 0 else lam * 10
        if not accepted:
            if step is None and cost > 0:
                raise AlignmentError("normal equations stayed singular after damping")
            break
        if np.linalg.norm(step) < tol:
            break
    z = _solve_heights(poses, edges)
    return [Pose(x[3 * k], x[3 * k + 1], z[k], x[3 * k + 2]) for k in range(n)]


def _solve_heights(poses: Sequence[Pose], edges: Sequence[Edge]) -> np.ndarray:
    n = len(poses)
    z = np.array([p.z for p in poses])
    if n == 1:
        return z
    rows, rhs, wts = [], [], []
    for i, j, m, w in edges:
        row = np.zeros(n)
        row[j] += 1.0
        row[i] -= 1.0
        rows.append(row)
        rhs.append(m.z)
        wts.append(math.sqrt(w))
    A = np.array(rows) * np.array(wts)[:, None]
    y = np.array(rhs) * np.array(wts) - A[:, 0] * z[0]
    sol, *_ = np.linalg.lstsq(A[:, 1:], y, rcond=None)
    return np.concatenate([[z[0]], sol])


# -- full alignment -------------------------------------------------------------


def align_agent(
    ego_boxes: Sequence[BBox],
    coop_boxes: Sequence[BBox],
    T_c_e_prior: Pose,
    cfg: AlignConfig | None = None,
) -> AlignmentResult:
    """Correct the cooperative-to-ego transform from box correspondences.

    Descriptor matching proposes pairs; geometric verification then keeps
    the two-pair hypothesis (over each box's best descriptor candidates)
    with the most mutually-nearest supporting boxes and refines it on that
    support. Falls back to the prior, flagged low confidence, when matching
    or verification fails or the result lands implausibly far from the
    prior. The prior never influences which pairs are matched.
    """
    cfg = cfg or AlignConfig()
    if len(ego_boxes) < 2 or len(coop_boxes) < 2:
        return AlignmentResult(T_c_e_prior, True, MatchResult(), [])
    da = build_descriptors(ego_boxes, cfg.k, cfg.dist_normalizer, cfg.axial)
    db = build_descriptors(coop_boxes, cfg.k, cfg.dist_normalizer, cfg.axial)
    cost = np.linalg.norm(da[:, None, :] - db[None, :, :], axis=2)
    match = match_cost_matrix(cost, cfg.reject_threshold)
    if len(match.pairs) < cfg.min_pairs:
        return AlignmentResult(T_c_e_prior, True, match, [])

    ego_xy = np.array([[b.cx, b.cy] for b in ego_boxes])
    coop_xy = np.array([[b.cx, b.cy] for b in coop_boxes])
    ego_yaw = np.array([b.yaw for b in ego_boxes])
    coop_yaw = np.array([b.yaw for b in coop_boxes])
    cand = _candidate_pairs(cost, match.pairs, cfg.candidates_per_box)
    pose = _best_hypothesis(cand, ego_xy, coop_xy, ego_yaw, coop_yaw, cfg)
    if pose is None:
        return AlignmentResult(T_c_e_prior, True, match, [])
    inliers: list[tuple[int, int]] = []
    for _ in range(cfg.refine_iterations):
        kept = _support(pose, ego_xy, coop_xy, ego_yaw, coop_yaw, cfg)
        if len(kept) < cfg.min_inliers:
            return AlignmentResult(T_c_e_prior, True, match, [])
        pose = estimate_se2([(ego_boxes[i], coop_boxes[j]) for i, j in kept])
        if kept == inliers:
            break
        inliers = kept
    dev = compose_pose(invert_pose(T_c_e_prior), pose)
    if math.hypot(dev.x, dev.y) > cfg.max_prior_translation or abs(math.degrees(dev.yaw)) > cfg.max_prior_rotation_deg:
        return AlignmentResult(T_c_e_prior, True, match, [])
    return AlignmentResult(pose, False, match, inliers)


def _candidate_pairs(cost: np.ndarray, pairs: Sequence[tuple[int, int]], m: int) -> list[tuple[int, int]]:
    """Hungarian pairs plus each ego box's ``m`` cheapest coop boxes, deduplicated in a fixed order."""
    out = list(pairs)
    seen = set(out)
    m = min(m, cost.shape[1])
    best = np.argsort(cost, axis=1, kind="stable")[:, :m]
    for i in range(cost.shape[0]):
        for j in best[i]:
            p = (i, int(j))
            if p not in seen:
                seen.add(p)
                out.append(p)
    return out


def _heading_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Undirected heading difference in [0, pi/2]."""
    d = np.mod(a - b, math.pi)
    return np.minimum(d, math.pi - d)


def _best_hypothesis(cand, ego_xy, coop_xy, ego_yaw, coop_yaw, cfg: AlignConfig) -> Pose | None:
    if len(cand) < 2:
        return None
    c = np.array(cand)
    pe, pc = ego_xy[c[:, 0]], coop_xy[c[:, 1]]
    a, b = np.triu_indices(len(c), k=1)
    ok = (c[a, 0] != c[b, 0]) & (c[a, 1] != c[b, 1])
    de = np.linalg.norm(pe[a] - pe[b], axis=1)
    dc = np.linalg.norm(pc[a] - pc[b], axis=1)
    ok &= (np.abs(de - dc) <= cfg.inlier_radius) & (de > 1.0)
    a, b = a[ok], b[ok]
    if len(a) == 0:
        return None
    # closed-form two-point rigid fits, all hypotheses at once
    ve, vc = pe[b] - pe[a], pc[b] - pc[a]
    yaw = np.arctan2(vc[:, 0] * ve[:, 1] - vc[:, 1] * ve[:, 0], vc[:, 0] * ve[:, 0] + vc[:, 1] * ve[:, 1])
    tol = math.radians(cfg.heading_tolerance_deg)
    ok = (_heading_gap(ego_yaw[c[a, 0]], coop_yaw[c[a, 1]] + yaw) <= tol) & (_heading_gap(ego_yaw[c[b, 0]], coop_yaw[c[b, 1]] + yaw) <= tol)
    a, b, yaw = a[ok], b[ok], yaw[ok]
    if len(a) == 0:
        return None
    cy, sy = np.cos(yaw), np.sin(yaw)
    mid_c = (pc[a] + pc[b]) / 2
    mid_e = (pe[a] + pe[b]) / 2
    tx = mid_e[:, 0] - (cy * mid_c[:, 0] - sy * mid_c[:, 1])
    ty = mid_e[:, 1] - (sy * mid_c[:, 0] + cy * mid_c[:, 1])
    best, best_n, best_r = None, 0, math.inf
    for h in range(len(a)):
        T = Pose(tx[h], ty[h], 0.0, yaw[h])
        sup = _support(T, ego_xy, coop_xy, ego_yaw, coop_yaw, cfg)
        if len(sup) < best_n:
            continue
        r = sum(_center_distance(T, ego_xy[i], coop_xy[j]) for i, j in sup)
        if len(sup) > best_n or r < best_r:
            best, best_n, best_r = T, len(sup), r
    if best_n < cfg.min_inliers:
        return None
    return best


def _center_distance(T: Pose, e: np.ndarray, c: np.ndarray) -> float:
    p = T.apply(c[None, :])[0]
    return float(math.hypot(p[0] - e[0], p[1] - e[1]))


def _support(T: Pose, ego_xy, coop_xy, ego_yaw, coop_yaw, cfg: AlignConfig) -> list[tuple[int, int]]:
    """Mutually nearest (ego, coop) boxes within the inlier radius with agreeing headings."""
    moved = T.apply(coop_xy)
    d = np.linalg.norm(ego_xy[:, None, :] - moved[None, :, :], axis=2)
    j_of_i = d.argmin(axis=1)
    i_of_j = d.argmin(axis=0)
    tol = math.radians(cfg.heading_tolerance_deg)
    out = []
    for i, j in enumerate(j_of_i):
        if i_of_j[j] == i and d[i, j] <= cfg.inlier_radius:
            if _heading_gap(np.array([ego_yaw[i]]), np.array([coop_yaw[j] + T.yaw]))[0] <= tol:
                out.append((i, int(j)))
    return out


def correspondence_accuracy(pairs: Sequence[tuple[int, int]], truth: dict[int, int]) -> float:
    """Fraction of accepted pairs that are true correspondences (1.0 if none)."""
    if not pairs:
        return 1.0
    return float(np.mean([truth.get(i) == j for i, j in pairs]))
