"""Detection evaluation: greedy IoU matching, all-point AP, pose errors."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .geometry import BBox, Pose, bev_iou, compose_pose, invert_pose, iou_3d, wrap_angle

Metric = Literal["bev", "3d"]
Sorting = Literal["global", "local"]


class EvaluationError(ValueError):
    pass


def iou_matrix(dets: Sequence[BBox], gts: Sequence[BBox], metric: Metric = "bev") -> np.ndarray:
    fn = bev_iou if metric == "bev" else iou_3d
    m = np.zeros((len(dets), len(gts)))
    if not dets or not gts:
        return m
    # only pairs whose circumcircles overlap can intersect
    dc = np.array([[d.cx, d.cy, 0.5 * math.hypot(d.l, d.w)] for d in dets])
    gc = np.array([[g.cx, g.cy, 0.5 * math.hypot(g.l, g.w)] for g in gts])
    near = np.hypot(dc[:, None, 0] - gc[None, :, 0], dc[:, None, 1] - gc[None, :, 1]) <= dc[:, None, 2] + gc[None, :, 2]
    for i, j in zip(*np.nonzero(near)):
        m[i, j] = fn(dets[i], gts[j])
    return m


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Descending by score; stable so equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def match_detections(
    dets: Sequence[BBox], gts: Sequence[BBox], iou_thr: float, metric: Metric = "bev"
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order.

    Returns per-detection TP flags and matched GT index (-1 for FPs), both in
    the original detection order.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in (0, 1]")
    if metric not in ("bev", "3d"):
        raise ValueError(f"unknown metric {metric!r}")
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.full(len(dets), -1, dtype=np.int64)
    if not dets or not gts:
        return tp, matched
    ious = iou_matrix(dets, gts, metric)
    taken = np.zeros(len(gts), dtype=bool)
    for i in score_order([d.score for d in dets]):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            tp[i] = True
            matched[i] = j
            taken[j] = True
    return tp, matched


def precision_recall(tp_sorted: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp_c = np.cumsum(tp_sorted)
    fp_c = np.cumsum(~tp_sorted)
    recall = tp_c / n_gt
    precision = tp_c / np.maximum(tp_c + fp_c, 1)
    return precision, recall


def all_point_ap(tp_sorted: np.ndarray, n_gt: int) -> float:
    """Area under the monotone precision envelope at every recall step."""
    if len(tp_sorted) == 0:
        return 0.0
    precision, recall = precision_recall(np.asarray(tp_sorted, dtype=bool), n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    frames: Sequence[tuple[Sequence[BBox], Sequence[BBox]]],
    iou_thr: float,
    sorting: Sorting = "global",
    metric: Metric = "bev",
) -> float:
    """AP over frames of (detections, ground truth).

    ``global`` pools every detection and sorts once by score; ``local`` sorts
    inside each frame and concatenates the frames in order.
    """
    if not frames:
        raise EvaluationError("need at least one frame")
    if sorting not in ("global", "local"):
        raise ValueError(f"unknown sorting {sorting!r}")
    n_gt = sum(len(g) for _, g in frames)
    if n_gt == 0:
        raise EvaluationError("AP is undefined without ground truth")
    flags, scores = [], []
    for dets, gts in frames:
        tp, _ = match_detections(dets, gts, iou_thr, metric)
        s = np.array([d.score for d in dets], dtype=float)
        if sorting == "local":
            order = score_order(s)
            tp, s = tp[order], s[order]
        flags.append(tp)
        scores.append(s)
    tp_all = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    if sorting == "global":
        order = score_order(np.concatenate(scores))
        tp_all = tp_all[order]
    return all_point_ap(tp_all, n_gt)


def pose_error(T_est: Pose, T_gt: Pose) -> tuple[float, float]:
    """Planar translation (m) and absolute heading (deg) of ``T_est^-1 * T_gt``."""
    d = compose_pose(invert_pose(T_est), T_gt)
    return math.hypot(d.x, d.y), abs(math.degrees(wrap_angle(d.yaw)))


METRIC_COLUMNS = (
    "experiment",
    "variant",
    "epsilon",
    "latency_ms",
    "iou_thr",
    "metric",
    "sorting",
    "ap",
    "median_trans_err_m",
    "median_rot_err_deg",
    "n_frames",
    "n_gt",
)


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    variant: str
    epsilon: float
    latency_ms: float
    iou_thr: float
    metric: str
    sorting: str
    ap: float
    median_trans_err_m: float
    median_rot_err_deg: float
    n_frames: int
    n_gt: int

    def as_list(self) -> list[str]:
        return [
            self.experiment,
            self.variant,
            f"{self.epsilon:.4f}",
            f"{self.latency_ms:.1f}",
            f"{self.iou_thr:.2f}",
            self.metric,
            self.sorting,
            f"{self.ap:.6f}",
            _fmt(self.median_trans_err_m),
            _fmt(self.median_rot_err_deg),
            str(self.n_frames),
            str(self.n_gt),
        ]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()
