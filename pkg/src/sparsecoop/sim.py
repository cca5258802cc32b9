"""Deterministic multi-agent scene and LiDAR/communication simulator.

World frame: flat ground at z = 0, vehicles stand on it. An agent's pose puts
its sensor at ``z = mount height``, so in the sensor frame the ground sits at
``z = -h``. Scans are rolling-shutter: each azimuth column fires at its own
time and sees vehicles where they are at that instant. Returns are expressed
in the agent frame at the end of the sweep (the frame's global timestamp),
compensated for the agent's own motion.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .augment import LidarModel
from .geometry import BBox, Pose, TimedPointCloud, compose_pose, invert_pose, wrap_angle

# rng stream tags
STREAM_NOISE = 1
STREAM_LATENCY = 2
STREAM_SCENE = 3


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]]))


@dataclass(frozen=True)
class Vehicle:
    box: BBox  # state at t = 0
    velocity: tuple[float, float] = (0.0, 0.0)
    yaw_rate: float = 0.0

    def state_at(self, t: float) -> tuple[float, float, float]:
        """Center x, y and heading at time ``t``; the velocity vector turns with the yaw rate."""
        vx, vy = self.velocity
        w = self.yaw_rate
        if abs(w) < 1e-12:
            dx, dy = vx * t, vy * t
        else:
            s, c1 = math.sin(w * t) / w, (1.0 - math.cos(w * t)) / w
            dx = s * vx - c1 * vy
            dy = c1 * vx + s * vy
        return self.box.cx + dx, self.box.cy + dy, self.box.yaw + w * t

    def box_at(self, t: float) -> BBox:
        x, y, yaw = self.state_at(t)
        return replace(self.box, cx=x, cy=y, yaw=yaw, t=t, score=1.0)

    def states_at(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        vx, vy = self.velocity
        w = self.yaw_rate
        if abs(w) < 1e-12:
            dx, dy = vx * t, vy * t
        else:
            s, c1 = np.sin(w * t) / w, (1.0 - np.cos(w * t)) / w
            dx = s * vx - c1 * vy
            dy = c1 * vx + s * vy
        return self.box.cx + dx, self.box.cy + dy, self.box.yaw + w * t


@dataclass(frozen=True)
class Agent:
    agent_id: int
    lidar: LidarModel
    vehicle: int | None = None  # index into Scenario.vehicles
    pose: Pose | None = None  # static mount (infrastructure) when vehicle is None
    phase: float = 0.0  # sweep start offset within the frame period

    def __post_init__(self) -> None:
        if (self.vehicle is None) == (self.pose is None):
            raise ValueError("agent needs exactly one of vehicle or pose")


@dataclass(frozen=True)
class ErrorModel:
    """Pose noise: x, y ~ N(0,1)*eps meters, yaw ~ N(0,1)*eps degrees."""

    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class LatencyModel:
    min_ms: float = 0.0
    max_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.min_ms < 0 or self.max_ms < self.min_ms:
            raise ValueError("latency range must satisfy 0 <= min <= max")

    def sample(self, rng: np.random.Generator) -> float:
        if self.max_ms == self.min_ms:
            return self.min_ms / 1000.0
        return float(rng.uniform(self.min_ms, self.max_ms)) / 1000.0


@dataclass(frozen=True)
class Scenario:
    seed: int
    agents: tuple[Agent, ...]
    vehicles: tuple[Vehicle, ...]
    duration: float = 1.0
    frame_period: float = 0.1
    error_model: ErrorModel = field(default_factory=ErrorModel)
    latency: LatencyModel = field(default_factory=LatencyModel)
    name: str = "scenario"

    def __post_init__(self) -> None:
        if not self.agents:
            raise ValueError("scenario needs at least one agent")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        for a in self.agents:
            if a.vehicle is not None and not 0 <= a.vehicle < len(self.vehicles):
                raise ValueError(f"agent {a.agent_id} references missing vehicle {a.vehicle}")

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration / self.frame_period + 1e-9))

    def agent(self, agent_id: int) -> Agent:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise KeyError(agent_id)

    def sweep_start(self, agent: Agent, frame: int) -> float:
        return agent.phase + frame * self.frame_period

    def frame_time(self, agent: Agent, frame: int) -> float:
        """Global timestamp of a frame: the end of the agent's sweep."""
        return self.sweep_start(agent, frame) + agent.lidar.sweep_time


def agent_pose_at(scene: Scenario, agent: Agent, t: float) -> Pose:
    if agent.vehicle is None:
        return agent.pose
    x, y, yaw = scene.vehicles[agent.vehicle].state_at(t)
    return Pose(x, y, agent.lidar.height_h, yaw)


def ground_truth_at(scene: Scenario, t_g: float, exclude: Sequence[int] = ()) -> list[BBox]:
    """Vehicle boxes at global time ``t_g`` in the world frame."""
    return [v.box_at(t_g) for k, v in enumerate(scene.vehicles) if k not in exclude]


# -- LiDAR ---------------------------------------------------------------------


def _ray_directions(model: LidarModel) -> tuple[np.ndarray, np.ndarray]:
    az = np.arange(model.n_columns) * (2 * math.pi / model.n_columns)
    incl = np.asarray(model.ring_inclinations)
    return az, incl


def lidar_scan(
    scene: Scenario, agent: Agent, t_start: float, deskew: bool = True, column_chunk: int = 150
) -> TimedPointCloud:
    """Cast one rolling-shutter sweep.

    Column ``c`` fires at ``t_start + (azimuth / 2 pi) * sweep_time``; each ray
    returns the nearest hit among vehicle boxes (slab test in the box frame)
    and the ground plane. ``labels`` holds the vehicle index or -1 for ground.
    With ``deskew`` the points are expressed in the sensor frame at the end of
    the sweep; otherwise each point stays in the sensor frame of its own
    firing instant, as a raw driver would report it.
    """
    model = agent.lidar
    az, incl = _ray_directions(model)
    n_rings = len(incl)
    t_cols = t_start + az / (2 * math.pi) * model.sweep_time
    t_ref = t_start + model.sweep_time
    ref_inv = invert_pose(agent_pose_at(scene, agent, t_ref))
    others = [k for k in range(len(scene.vehicles)) if k != agent.vehicle]
    half = np.array([[scene.vehicles[k].box.l / 2, scene.vehicles[k].box.w / 2, scene.vehicles[k].box.h / 2] for k in others]).reshape(-1, 3)
    cz = np.array([scene.vehicles[k].box.cz for k in others])
    cos_i, sin_i = np.cos(incl), np.sin(incl)

    out_pts, out_lab = [], []
    for c0 in range(0, len(az), column_chunk):
        cols = slice(c0, min(c0 + column_chunk, len(az)))
        tc = t_cols[cols]
        nc = len(tc)
        # sensor pose per column
        if agent.vehicle is None:
            sx = np.full(nc, agent.pose.x)
            sy = np.full(nc, agent.pose.y)
            syaw = np.full(nc, agent.pose.yaw)
        else:
            sx, sy, syaw = scene.vehicles[agent.vehicle].states_at(tc)
        sz = model.height_h if agent.vehicle is not None else agent.pose.z
        heading = syaw + az[cols]
        # (nc, rings, 3) world directions
        d = np.empty((nc, n_rings, 3))
        d[..., 0] = np.cos(heading)[:, None] * cos_i[None, :]
        d[..., 1] = np.sin(heading)[:, None] * cos_i[None, :]
        d[..., 2] = np.broadcast_to(sin_i[None, :], (nc, n_rings))

        best = np.full((nc, n_rings), np.inf)
        label = np.full((nc, n_rings), -3, dtype=np.int64)
        down = d[..., 2] < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            s_ground = np.where(down, sz / -d[..., 2], np.inf)
        hit_g = s_ground <= model.max_range
        best = np.where(hit_g, s_ground, best)
        label = np.where(hit_g, -1, label)

        if others:
            bx = np.empty((nc, len(others)))
            by = np.empty_like(bx)
            byaw = np.empty_like(bx)
            for m, k in enumerate(others):
                bx[:, m], by[:, m], byaw[:, m] = scene.vehicles[k].states_at(tc)
            c, s = np.cos(byaw), np.sin(byaw)
            ox = sx[:, None] - bx
            oy = sy[:, None] - by
            # origin in box frame: (nc, V)
            lox = c * ox + s * oy
            loy = -s * ox + c * oy
            loz = sz - cz[None, :]
            # directions in box frame: (nc, rings, V)
            ldx = c[:, None, :] * d[..., 0:1] + s[:, None, :] * d[..., 1:2]
            ldy = -s[:, None, :] * d[..., 0:1] + c[:, None, :] * d[..., 1:2]
            ldz = np.broadcast_to(d[..., 2:3], ldx.shape)
            tmin = np.zeros(ldx.shape)
            tmax = np.full(ldx.shape, np.inf)
            with np.errstate(divide="ignore", invalid="ignore"):
                for o, dd, hh in ((lox[:, None, :], ldx, half[:, 0]), (loy[:, None, :], ldy, half[:, 1]), (np.broadcast_to(loz, lox.shape)[:, None, :], ldz, half[:, 2])):
                    inv = 1.0 / dd
                    t1 = (-hh - o) * inv
                    t2 = (hh - o) * inv
                    lo = np.minimum(t1, t2)
                    hi = np.maximum(t1, t2)
                    # parallel ray: inside slab -> no constraint, outside -> miss
                    par = dd == 0
                    inside = np.abs(o) <= hh
                    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
                    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
                    tmin = np.maximum(tmin, lo)
                    tmax = np.minimum(tmax, hi)
            hit = (tmin <= tmax) & (tmin > 0) & (tmin <= model.max_range)
            s_box = np.where(hit, tmin, np.inf)
            v_idx = np.argmin(s_box, axis=2)
            s_near = np.take_along_axis(s_box, v_idx[..., None], axis=2)[..., 0]
            closer = s_near < best
            best = np.where(closer, s_near, best)
            label = np.where(closer, np.asarray(others)[v_idx], label)

        valid = np.isfinite(best)
        if not valid.any():
            continue
        ci, ri = np.nonzero(valid)
        s_v = best[ci, ri]
        world = np.empty((len(ci), 3))
        world[:, 0] = sx[ci] + s_v * d[ci, ri, 0]
        world[:, 1] = sy[ci] + s_v * d[ci, ri, 1]
        world[:, 2] = sz + s_v * d[ci, ri, 2]
        if deskew:
            local = ref_inv.apply(world)
        else:
            local = np.empty_like(world)
            c, sn = np.cos(syaw[ci]), np.sin(syaw[ci])
            dx, dy = world[:, 0] - sx[ci], world[:, 1] - sy[ci]
            local[:, 0] = c * dx + sn * dy
            local[:, 1] = -sn * dx + c * dy
            local[:, 2] = world[:, 2] - sz
        # ground hits sit exactly at -h in the sensor frame
        local[label[ci, ri] == -1, 2] = -sz
        pts = np.column_stack([local, tc[ci]])
        out_pts.append(pts)
        out_lab.append(label[ci, ri])
    frame = f"agent{agent.agent_id}"
    if not out_pts:
        return TimedPointCloud(np.zeros((0, 4)), frame=frame, labels=np.zeros(0, dtype=np.int64))
    return TimedPointCloud(np.concatenate(out_pts), frame=frame, labels=np.concatenate(out_lab))


def deskew(scene: Scenario, agent: Agent, pc: TimedPointCloud, t_ref: float) -> TimedPointCloud:
    """Move raw per-firing points into the sensor frame at ``t_ref`` using the agent's own motion."""
    if agent.vehicle is None or len(pc) == 0:
        return replace(pc, points=pc.points.copy())
    veh = scene.vehicles[agent.vehicle]
    t = pc.points[:, 3]
    sx, sy, syaw = veh.states_at(t)
    c, s = np.cos(syaw), np.sin(syaw)
    px, py = pc.points[:, 0], pc.points[:, 1]
    wx = sx + c * px - s * py
    wy = sy + s * px + c * py
    rx, ry, ryaw = veh.state_at(t_ref)
    cr, sr = math.cos(ryaw), math.sin(ryaw)
    dx, dy = wx - rx, wy - ry
    out = pc.points.copy()
    out[:, 0] = cr * dx + sr * dy
    out[:, 1] = -sr * dx + cr * dy
    return replace(pc, points=out)


# -- noise & latency ------------------------------------------------------------


def inject_pose_noise(p: Pose, em: ErrorModel, rng: np.random.Generator) -> Pose:
    if em.epsilon == 0:
        return p
    nx, ny, nr = rng.standard_normal(3)
    return Pose(p.x + nx * em.epsilon, p.y + ny * em.epsilon, p.z, p.yaw + math.radians(nr * em.epsilon))


def noisy_agent_pose(scene: Scenario, agent: Agent, frame: int, t: float, em: ErrorModel | None = None) -> Pose:
    em = em or scene.error_model
    rng = rng_for(scene.seed, STREAM_NOISE, agent.agent_id, frame)
    return inject_pose_noise(agent_pose_at(scene, agent, t), em, rng)


def frame_latency(scene: Scenario, agent: Agent, frame: int, model: LatencyModel | None = None) -> float:
    model = model or scene.latency
    return model.sample(rng_for(scene.seed, STREAM_LATENCY, agent.agent_id, frame))


@dataclass(order=True)
class Delivery:
    t_deliver: float
    seq: int
    t_send: float = field(compare=False)
    message: object = field(compare=False)


class EventQueue:
    """Messages ordered by delivery time (ties by submission order)."""

    def __init__(self) -> None:
        self._heap: list[Delivery] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, message, t_send: float, latency: float) -> Delivery:
        if latency < 0:
            raise ValueError("latency must be non-negative")
        ev = Delivery(t_send + latency, next(self._seq), t_send, message)
        heapq.heappush(self._heap, ev)
        return ev

    def pop_ready(self, t_now: float, tol: float = 1e-9) -> list[Delivery]:
        out = []
        while self._heap and self._heap[0].t_deliver <= t_now + tol:
            out.append(heapq.heappop(self._heap))
        return out

    def __iter__(self) -> Iterator[Delivery]:
        return iter(sorted(self._heap))


def deliver_with_latency(queue: EventQueue, cpm, latency: float) -> Delivery:
    return queue.push(cpm, cpm.t, latency)


# -- procedural scenes ------------------------------------------------------------


VEHICLE_DIMS = {"l": (3.9, 5.2), "w": (1.7, 2.1), "h": (1.4, 1.9)}


def _random_box(rng: np.random.Generator, x: float, y: float, yaw: float) -> BBox:
    l = float(rng.uniform(*VEHICLE_DIMS["l"]))
    w = float(rng.uniform(*VEHICLE_DIMS["w"]))
    h = float(rng.uniform(*VEHICLE_DIMS["h"]))
    return BBox(x, y, h / 2, l, w, h, yaw)


def generate_scenario(
    seed: int,
    n_vehicles: int = 30,
    n_agents: int = 2,
    layout: str = "highway",
    speed_range: tuple[float, float] = (0.0, 12.0),
    agent_spacing: tuple[float, float] = (15.0, 40.0),
    duration: float = 0.8,
    frame_period: float = 0.1,
    lidar: LidarModel | None = None,
    sync: bool = False,
    error_model: ErrorModel | None = None,
    latency: LatencyModel | None = None,
) -> Scenario:
    """Seeded road scene; agents ride vehicles near the origin.

    ``highway``: four lanes along x plus parked rows on both shoulders.
    ``intersection``: two crossing two-lane roads with parked rows.
    """
    rng = rng_for(seed, STREAM_SCENE)
    lidar = lidar or LidarModel()
    vehicles: list[Vehicle] = []
    occupied: list[tuple[float, float, float]] = []

    def free_at(x, y, r=6.5):
        return all(math.hypot(x - ox, y - oy) > r and not (abs(y - oy) < 1.0 and abs(x - ox) < r) for ox, oy, _ in occupied)

    def place(x, y, yaw, speed):
        box = _random_box(rng, x, y, yaw)
        vehicles.append(Vehicle(box, (speed * math.cos(yaw), speed * math.sin(yaw)), 0.0))
        occupied.append((x, y, yaw))

    # agents first so they sit near the origin on driving lanes
    if layout == "highway":
        lanes = [(-5.25, math.pi), (-1.75, math.pi), (1.75, 0.0), (5.25, 0.0)]
        parked = [(-9.5, 0.0), (9.5, math.pi)]
    elif layout == "intersection":
        lanes = [(-1.75, math.pi), (1.75, 0.0)]
        parked = [(-6.0, 0.0), (6.0, math.pi)]
    else:
        raise ValueError(f"unknown layout {layout!r}")

    ahead, behind = 0.0, 0.0
    for a in range(n_agents):
        lane_y, lane_yaw = lanes[a % len(lanes)]
        speed = float(rng.uniform(*speed_range))
        if a == 0:
            x = 0.0
        elif a % 2:
            ahead += float(rng.uniform(*agent_spacing))
            x = ahead
        else:
            behind -= float(rng.uniform(*agent_spacing))
            x = behind
        place(x, lane_y, lane_yaw, speed)
    tries = 0
    while len(vehicles) < n_vehicles + n_agents and tries < 20000:
        tries += 1
        kind = rng.random()
        if layout == "intersection" and rng.random() < 0.5:
            # cross road along y
            if kind < 0.35:
                x, yaw = float(rng.choice([-6.0, 6.0])), float(rng.choice([math.pi / 2, -math.pi / 2]))
                y = float(rng.uniform(-60, 60))
                if abs(y) < 9:
                    continue
                speed = 0.0
            else:
                x = float(rng.choice([-1.75, 1.75]))
                yaw = math.pi / 2 if x > 0 else -math.pi / 2
                y = float(rng.uniform(-60, 60))
                if abs(y) < 5:
                    continue
                speed = float(rng.uniform(*speed_range))
        elif kind < 0.35:
            y, yaw = parked[int(rng.integers(len(parked)))]
            x = float(rng.uniform(-80, 80))
            if layout == "intersection" and abs(x) < 9:
                continue
            speed = 0.0
        else:
            y, yaw = lanes[int(rng.integers(len(lanes)))]
            x = float(rng.uniform(-90, 90))
            speed = float(rng.uniform(*speed_range))
        if not free_at(x, y):
            continue
        place(x, y, yaw, speed)

    agents = []
    for a in range(n_agents):
        phase = 0.0 if sync or a == 0 else float(rng.uniform(0, frame_period))
        agents.append(Agent(a, lidar, vehicle=a, phase=phase))
    return Scenario(
        seed=seed,
        agents=tuple(agents),
        vehicles=tuple(vehicles),
        duration=duration,
        frame_period=frame_period,
        error_model=error_model or ErrorModel(),
        latency=latency or LatencyModel(),
        name=f"{layout}-{seed}",
    )


def visible_counts(labels: np.ndarray, n_vehicles: int) -> np.ndarray:
    lab = labels[labels >= 0]
    return np.bincount(lab, minlength=n_vehicles)


def relative_truth(scene: Scenario, ego: Agent, t_ego: float, coop: Agent, t_coop: float) -> Pose:
    """True transform from the coop frame at ``t_coop`` to the ego frame at ``t_ego``."""
    return compose_pose(invert_pose(agent_pose_at(scene, ego, t_ego)), agent_pose_at(scene, coop, t_coop))


def world_to_agent(scene: Scenario, agent: Agent, t: float, boxes: Sequence[BBox]) -> list[BBox]:
    inv = invert_pose(agent_pose_at(scene, agent, t))
    out = []
    for b in boxes:
        bb = b.transformed(inv)
        out.append(replace(bb, cz=b.cz - agent_pose_at(scene, agent, t).z, yaw=wrap_angle(bb.yaw)))
    return out
