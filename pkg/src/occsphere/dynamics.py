"""Pose integration and the built-in environment-agent controller."""
from __future__ import annotations

import cmath
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .actors import ActorBank, ActorInstance
from .core import BevCode, BevMap, Label, Pose
from .geometry import Polyline, rect_corners, rects_overlap

log = logging.getLogger(__name__)

DEFAULT_DT = 0.5


@dataclass(frozen=True)
class ControlLimits:
    max_accel: float = 8.0
    max_yaw_rate: float = 1.5


@dataclass(frozen=True)
class ControlSignal:
    accel: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "accel", float(self.accel))
        object.__setattr__(self, "yaw_rate", float(self.yaw_rate))

    def is_finite(self) -> bool:
        return math.isfinite(self.accel) and math.isfinite(self.yaw_rate)

    def clamp(self, limits: ControlLimits = ControlLimits()) -> "ControlSignal":
        if not self.is_finite():
            raise ValueError(f"non-finite control {self}")
        return ControlSignal(
            min(max(self.accel, -limits.max_accel), limits.max_accel),
            min(max(self.yaw_rate, -limits.max_yaw_rate), limits.max_yaw_rate),
        )


_SERIES_RADIUS = 0.5
_SERIES_TERMS = 24


def _phi1(z: complex) -> complex:
    """(e^z - 1) / z, i.e. the integral of e^(z s) over s in [0, 1]."""
    if abs(z) < _SERIES_RADIUS:
        term, acc = 1.0 + 0j, 0j
        for n in range(_SERIES_TERMS):
            acc += term / (n + 1)
            term *= z / (n + 1)
        return acc
    return (cmath.exp(z) - 1.0) / z


def _phi2(z: complex) -> complex:
    """Integral of s * e^(z s) over s in [0, 1]."""
    if abs(z) < _SERIES_RADIUS:
        term, acc = 1.0 + 0j, 0j
        for n in range(_SERIES_TERMS):
            acc += term / (n + 2)
            term *= z / (n + 1)
        return acc
    e = cmath.exp(z)
    return (z * e - e + 1.0) / (z * z)


def integrate_pose(pose: Pose, speed: float, c: ControlSignal, dt: float) -> tuple[Pose, float]:
    """Advance a kinematic unicycle by ``dt`` in closed form.

    Speed changes linearly with ``c.accel`` and stops at zero; heading turns
    at the constant ``c.yaw_rate``. The planar displacement is the exact
    integral of ``v(t) * (cos, sin)(yaw(t))``, evaluated as
    ``e^{i yaw0} * T * (v0 * phi1(i w T) + a * T * phi2(i w T))`` over the
    moving part ``T`` of the step.
    """
    vals = (pose.x, pose.y, pose.z, pose.yaw, speed, c.accel, c.yaw_rate, dt)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite integration input: {vals}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if speed < 0:
        raise ValueError(f"speed must be non-negative, got {speed}")
    a, w = c.accel, c.yaw_rate
    v_end = speed + a * dt
    moving = dt
    if v_end < 0.0:
        moving = -speed / a if a < 0 else 0.0
        v_end = 0.0
    disp = 0j
    if moving > 0.0:
        z = 1j * w * moving
        disp = cmath.exp(1j * pose.yaw) * moving * (speed * _phi1(z) + a * moving * _phi2(z))
    new = Pose(pose.x + disp.real, pose.y + disp.imag, pose.z, pose.yaw + w * dt)
    return new, v_end


# --- lanes -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Lane:
    lane_id: str
    points: np.ndarray
    successors: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "successors", tuple(self.successors))
        object.__setattr__(self, "_line", Polyline(pts))

    @property
    def line(self) -> Polyline:
        return self._line

    @property
    def length(self) -> float:
        return self._line.length

    def __eq__(self, other):
        if not isinstance(other, Lane):
            return NotImplemented
        return (self.lane_id == other.lane_id and self.successors == other.successors
                and np.array_equal(self.points, other.points))

    __hash__ = None


class LaneGraph:
    """Directed lanes keyed by id, iterated in id order."""

    def __init__(self, lanes=()):
        d = {}
        for lane in lanes:
            if lane.lane_id in d:
                raise ValueError(f"duplicate lane id {lane.lane_id!r}")
            d[lane.lane_id] = lane
        self.lanes = dict(sorted(d.items()))
        for lane in self.lanes.values():
            missing = [s for s in lane.successors if s not in self.lanes]
            if missing:
                raise ValueError(f"lane {lane.lane_id!r} names unknown successors {missing}")

    def __len__(self):
        return len(self.lanes)

    def __getitem__(self, lane_id) -> Lane:
        return self.lanes[lane_id]

    def __eq__(self, other):
        return isinstance(other, LaneGraph) and list(self.lanes.items()) == list(other.lanes.items())

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"lane_id": l.lane_id, "points": l.points.tolist(), "successors": list(l.successors)},
                       sort_keys=True) + "\n"
            for l in self.lanes.values()
        )

    @classmethod
    def from_jsonl(cls, text: str) -> "LaneGraph":
        lanes = []
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                lanes.append(Lane(str(rec["lane_id"]), rec["points"], tuple(rec.get("successors", ()))))
        return cls(lanes)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "LaneGraph":
        with open(path, encoding="utf-8") as f:
            return cls.from_jsonl(f.read())


def _road_bands(full: np.ndarray) -> list[tuple[int, int]]:
    bands, start = [], None
    for i, v in enumerate(full):
        if v and start is None:
            start = i
        if not v and start is not None:
            bands.append((start, i))
            start = None
    if start is not None:
        bands.append((start, len(full)))
    return bands


def lane_graph_from_bev(bev: BevMap) -> LaneGraph:
    """Two opposing lanes per straight road that spans the whole map.

    Handles the axis-aligned road networks produced by
    :func:`occsphere.scene.road_grid_bev`; roads that stop inside the map are
    ignored. Traffic keeps right.
    """
    cs = bev.cell_size
    ox, oy = bev.origin
    cells = bev.cells
    road = bev.road_mask()
    h, w = bev.dims
    lanes = []
    # roads running along +y occupy full rows of the first axis
    for axis in (0, 1):
        full = road.all(axis=1) if axis == 0 else road.all(axis=0)
        n_along = w if axis == 0 else h
        for lo, hi in _road_bands(full):
            strip = cells[lo:hi, :] if axis == 0 else cells[:, lo:hi].T
            div = [r for r in range(hi - lo) if np.any(strip[r] == BevCode.LANE_DIVIDER)]
            mid = lo + div[len(div) // 2] if div else None
            # lane centers sit halfway between the divider line and each road edge
            center = (mid + 0.5) if mid is not None else (lo + hi) / 2.0
            if center - lo < 1.0 or hi - center < 1.0:
                continue
            c_lo = (lo + center) / 2.0 * cs
            c_hi = (center + hi) / 2.0 * cs
            a0, a1 = 0.0, n_along * cs
            if axis == 0:
                # heading +y keeps right -> larger x
                lanes.append(Lane(f"y{lo}+", [[ox + c_hi, oy + a0], [ox + c_hi, oy + a1]]))
                lanes.append(Lane(f"y{lo}-", [[ox + c_lo, oy + a1], [ox + c_lo, oy + a0]]))
            else:
                # heading +x keeps right -> smaller y
                lanes.append(Lane(f"x{lo}+", [[ox + a0, oy + c_lo], [ox + a1, oy + c_lo]]))
                lanes.append(Lane(f"x{lo}-", [[ox + a1, oy + c_hi], [ox + a0, oy + c_hi]]))
    return LaneGraph(lanes)


@dataclass(frozen=True)
class LaneBinding:
    lane_id: str
    s: float
    lateral: float


def bind_to_lane(graph: LaneGraph, pose: Pose, tolerance: float = 2.0) -> LaneBinding | None:
    """Closest lane within ``tolerance`` whose direction agrees with the heading."""
    best = None
    for lane in graph.lanes.values():
        s, lat = lane.line.project((pose.x, pose.y))
        if abs(lat) > tolerance or s < 0.0 or s > lane.length:
            continue
        if math.cos(lane.line.heading_at(s) - pose.yaw) <= 0.0:
            continue
        if best is None or abs(lat) < abs(best.lateral):
            best = LaneBinding(lane.lane_id, s, lat)
    return best


@dataclass(frozen=True)
class IDMParams:
    desired_speed: float = 8.0
    time_headway: float = 1.5
    max_decel: float = 4.0
    max_accel: float = 1.5
    min_gap: float = 2.0
    exponent: float = 4.0
    lookahead_min: float = 4.0
    lookahead_time: float = 1.0
    lane_tolerance: float = 2.0
    speed_jitter: float = 0.0
    limits: ControlLimits = ControlLimits()


def idm_accel(v: float, v0: float, gap: float | None, dv: float, p: IDMParams) -> float:
    """Intelligent-driver acceleration; ``gap=None`` means free road."""
    free = 1.0 - (v / v0) ** p.exponent if v0 > 0 else -1.0
    if gap is None:
        return p.max_accel * free
    s_star = p.min_gap + max(0.0, v * p.time_headway + v * dv / (2.0 * math.sqrt(p.max_accel * p.max_decel)))
    return p.max_accel * (free - (s_star / max(gap, 0.1)) ** 2)


def _lookahead(graph: LaneGraph, lane_id: str, s: float) -> np.ndarray:
    lane = graph[lane_id]
    while s > lane.length and lane.successors:
        s -= lane.length
        lane = graph[lane.successors[0]]
    return lane.line.point_at(s)


def pure_pursuit(pose: Pose, speed: float, target, lookahead: float) -> float:
    dx, dy = target[0] - pose.x, target[1] - pose.y
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    alpha = math.atan2(-s * dx + c * dy, c * dx + s * dy)
    return speed * 2.0 * math.sin(alpha) / lookahead


def environment_step(world, lane_graph: LaneGraph, seed: int, params: IDMParams = IDMParams(),
                     ego=None) -> dict[int, ControlSignal]:
    """Controls for every non-ego actor of ``world``.

    ``ego`` is an optional ``(pose, speed, (length, width))`` tuple; the ego
    then acts as a potential leader. Actors that cannot be bound to a lane
    are logged and receive zero control.
    """
    agents = []  # (instance_id, pose, speed, length, binding, class)
    for inst in sorted(world.actors, key=lambda a: a.instance_id):
        fp = world.footprints[inst.instance_id]
        agents.append((inst.instance_id, inst.pose, inst.speed, fp[0],
                       bind_to_lane(lane_graph, inst.pose, params.lane_tolerance),
                       world.classes.get(inst.instance_id)))
    others = [(a[0], a[4], a[2], a[3]) for a in agents]
    if ego is not None:
        ego_pose, ego_speed, ego_fp = ego
        others.append((None, bind_to_lane(lane_graph, ego_pose, params.lane_tolerance), ego_speed, ego_fp[0]))
    out = {}
    for iid, pose, speed, length, bind, cls in agents:
        if bind is None:
            log.warning("actor %s is off the lane graph; zero control", iid)
            out[iid] = ControlSignal(0.0, 0.0)
            continue
        v0 = params.desired_speed
        if cls is not None and cls != Label.CAR:
            from .actors import DEFAULT_SPEED

            v0 = DEFAULT_SPEED.get(Label(cls), v0)
        if params.speed_jitter > 0:
            u = np.random.default_rng([int(seed), int(iid)]).random()
            v0 *= 1.0 + params.speed_jitter * (2.0 * u - 1.0)
        gap, dv = None, 0.0
        for oid, obind, ospeed, olen in others:
            if oid == iid or obind is None or obind.lane_id != bind.lane_id or obind.s <= bind.s:
                continue
            g = obind.s - bind.s - (length + olen) / 2.0
            if gap is None or g < gap:
                gap, dv = g, speed - ospeed
        accel = idm_accel(speed, v0, gap, dv, params)
        ld = max(params.lookahead_min, params.lookahead_time * speed)
        target = _lookahead(lane_graph, bind.lane_id, bind.s + ld)
        yaw_rate = pure_pursuit(pose, speed, target, ld)
        out[iid] = ControlSignal(accel, yaw_rate).clamp(params.limits)
    return out


class SpawnError(RuntimeError):
    def __init__(self, achieved: int, requested: int):
        super().__init__(f"placed only {achieved} of {requested} actors under the spacing constraint")
        self.achieved = achieved
        self.requested = requested


def spawn_actors(lane_graph: LaneGraph, bank: ActorBank, count: int, seed: int, spacing: float = 8.0,
                 classes=(Label.CAR,), ground_z: float = 0.5, first_id: int = 1,
                 initial_speed: float | None = None, avoid=(), tries_per_actor: int = 200) -> list[ActorInstance]:
    """Seeded placement on lanes.

    Same-lane neighbors stay at least ``spacing`` apart along the lane and no
    two footprints overlap (nor any rectangle in ``avoid``, given as corner
    arrays).
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    pool = [a for a in bank.values() if a.label in {Label(int(c)) for c in classes}]
    lanes = list(lane_graph.lanes.values())
    if not pool or not lanes:
        raise SpawnError(0, count)
    rng = np.random.default_rng(seed)
    weights = np.array([l.length for l in lanes])
    weights = weights / weights.sum()
    placed = []  # (lane_id, s, corners, instance)
    for _ in range(tries_per_actor * count):
        if len(placed) == count:
            break
        lane = lanes[int(rng.choice(len(lanes), p=weights))]
        asset = pool[int(rng.integers(len(pool)))]
        length, width = asset.footprint[0], asset.footprint[1]
        lo, hi = length / 2.0, lane.length - length / 2.0
        s = float(rng.uniform(0.0, 1.0)) * (hi - lo) + lo
        if hi < lo:
            continue
        if any(lid == lane.lane_id and abs(s - ps) < spacing for lid, ps, _, _ in placed):
            continue
        xy = lane.line.point_at(s)
        yaw = lane.line.heading_at(s)
        corners = rect_corners(xy[0], xy[1], yaw, length, width)
        if any(rects_overlap(corners, c) for _, _, c, _ in placed) or any(rects_overlap(corners, c) for c in avoid):
            continue
        speed = asset.default_speed if initial_speed is None else initial_speed
        inst = ActorInstance(first_id + len(placed), asset.asset_id, Pose(xy[0], xy[1], ground_z, yaw), speed)
        placed.append((lane.lane_id, s, corners, inst))
    if len(placed) < count:
        raise SpawnError(len(placed), count)
    return [p[3] for p in placed]
