"""Experiment orchestration: local stage, sweep points, artifact writing."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import os
import platform
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from .config import ExperimentConfig, load_experiment
from .cpm import SIZE_LIMIT_BYTES, encode_cpm, select_cpm
from .metrics import MetricRow, rows_to_csv
from .pipeline import LocalFrame, ObjectTracker, SweepPoint, cpm_size_rows, run_local, run_point
from .sim import ErrorModel, noisy_agent_pose

SIZE_COLUMNS = ("experiment", "agent_id", "frame", "threshold", "n_queries", "n_boxes", "size_bytes", "within_limit")


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[MetricRow]
    size_rows: list[dict]
    connectivity: dict
    local: dict[tuple[int, int], LocalFrame]


def _local_for_agent(args) -> dict[tuple[int, int], LocalFrame]:
    scene, agent_id, cfg = args
    agent = scene.agent(agent_id)
    tracker = ObjectTracker()
    return {(agent_id, k): run_local(scene, agent, k, tracker, cfg) for k in range(scene.n_frames)}


def _point_rows(args) -> list[MetricRow]:
    scene, local, point, cfg, name = args
    return run_point(scene, local, point, cfg, name)


def sweep_points(exp: ExperimentConfig) -> list[SweepPoint]:
    if exp.latency_range is not None:
        lats: list[Any] = [tuple(exp.latency_range)]
    else:
        lats = list(exp.sweep.latency_ms)
    return [SweepPoint(e, lat) for e, lat in itertools.product(exp.sweep.epsilon, lats)]


def compute(exp: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    scene, cfg = exp.scenario, exp.pipeline
    ids = [a.agent_id for a in scene.agents]
    points = sweep_points(exp)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_local_for_agent, [(scene, a, cfg) for a in ids]))
            local = {k: v for part in parts for k, v in part.items()}
            row_parts = list(pool.map(_point_rows, [(scene, local, p, cfg, exp.name) for p in points]))
    else:
        local = {k: v for a in ids for k, v in _local_for_agent((scene, a, cfg)).items()}
        row_parts = [_point_rows((scene, local, p, cfg, exp.name)) for p in points]
    rows = [r for part in row_parts for r in part]
    sizes = cpm_size_rows(scene, local, cfg, exp.name)
    for s in sizes:
        s["within_limit"] = int(s["size_bytes"] <= SIZE_LIMIT_BYTES)
    return ExperimentResult(exp, rows, sizes, connectivity_report(exp, local), local)


def connectivity_report(exp: ExperimentConfig, local: dict[tuple[int, int], LocalFrame]) -> dict:
    ego = exp.pipeline.ego_id
    frames = []
    for k in range(exp.scenario.n_frames):
        lf = local[(ego, k)]
        if lf.grid is None:
            continue
        frames.append({"frame": k, "t": round(lf.t_ref, 9), "n_points": lf.n_points, "n_free_points": lf.n_free, **lf.grid})
    summary: dict[str, Any] = {}
    if frames:
        for tag in ("standard", "cec"):
            summary[tag] = {
                "mean_center_coverage": float(np.mean([f[tag]["center_coverage"] for f in frames])),
                "mean_s8_components": float(np.mean([f[tag]["s8_components"] for f in frames])),
            }
    return {"experiment": exp.name, "ego_id": ego, "frames": frames, "summary": summary}


def sizes_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SIZE_COLUMNS)
    for r in rows:
        w.writerow([r["experiment"], r["agent_id"], r["frame"], f"{r['threshold']:.4f}", r["n_queries"], r["n_boxes"], r["size_bytes"], r["within_limit"]])
    return buf.getvalue()


def versions() -> dict[str, str]:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"sparsecoop": own, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_artifacts(result: ExperimentResult, out_dir: str | Path, source: str) -> dict[str, str]:
    """Write all outputs; ``metrics.csv`` goes last so a failed run never leaves one behind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = result.config
    blobs: dict[str, bytes] = {
        "cpm_sizes.csv": sizes_to_csv(result.size_rows).encode(),
        "connectivity.json": _json_bytes(result.connectivity),
    }
    # one sample message per cooperating agent (last frame, first sweep point) for inspect-cpm
    scene, cfg = exp.scenario, exp.pipeline
    eps = exp.sweep.epsilon[0]
    for a in scene.agents:
        if a.agent_id == cfg.ego_id:
            continue
        k = scene.n_frames - 1
        lf = result.local[(a.agent_id, k)]
        pose = noisy_agent_pose(scene, a, k, lf.t_ref, ErrorModel(eps))
        msg = select_cpm(lf.message("full", pose, cfg.feature_width), cfg.cpm_threshold)
        blobs[f"cpm/agent{a.agent_id}_frame{k}.cpm"] = encode_cpm(msg)
    metrics = rows_to_csv(result.rows).encode()
    digests = {name: hashlib.sha256(b).hexdigest() for name, b in sorted({**blobs, "metrics.csv": metrics}.items())}
    manifest = {
        "experiment": exp.name,
        "scenario_source": source,
        "seed": scene.seed,
        "config_hash": exp.config_hash(),
        "versions": versions(),
        "sweep": [{"epsilon": p.epsilon, "latency_ms": p.latency_ms} for p in sweep_points(exp)],
        "outputs": digests,
    }
    for name, b in blobs.items():
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(p, b)
    _atomic_write(out / "run_manifest.json", _json_bytes(manifest))
    _atomic_write(out / "metrics.csv", metrics)
    return digests


def run_experiment(config_path: str, overrides: dict | None = None, out_dir: str | Path = "out", workers: int = 1) -> ExperimentResult:
    exp = load_experiment(config_path, overrides)
    result = compute(exp, workers)
    write_artifacts(result, out_dir, config_path)
    return result
