"""Per-step safety signals and episode driving scores."""
from __future__ import annotations

import configparser
import json
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import Label, Pose
from .geometry import Polyline, rect_corners, rects_overlap, time_to_contact

# labels an ego may occupy without colliding (air and the road surface)
_PASSABLE = (int(Label.EMPTY), int(Label.DRIVABLE_SURFACE))


class MetricsError(ValueError):
    pass


class EgoOffGridError(MetricsError):
    def __init__(self, tick: int, pose: Pose):
        super().__init__(f"ego left the grid at tick {tick}: ({pose.x:.3f}, {pose.y:.3f})")
        self.tick = tick


class Route:
    """Waypoint polyline the ego should follow, with a goal tolerance radius."""

    def __init__(self, waypoints, tolerance: float = 2.0):
        self.line = Polyline(waypoints)
        if tolerance < 0:
            raise MetricsError("route tolerance must be non-negative")
        self.tolerance = float(tolerance)

    @property
    def waypoints(self) -> np.ndarray:
        return self.line.points

    @property
    def total_length(self) -> float:
        return self.line.length

    def progress(self, x: float, y: float) -> float:
        s, _ = self.line.project((x, y))
        return min(max(s, 0.0), self.total_length)

    def goal_distance(self, x: float, y: float) -> float:
        gx, gy = self.line.points[-1]
        return math.hypot(x - gx, y - gy)

    def __eq__(self, other):
        return (isinstance(other, Route) and self.tolerance == other.tolerance
                and np.array_equal(self.waypoints, other.waypoints))


@dataclass(frozen=True)
class MetricsConfig:
    ttc_threshold: float = 0.95
    max_accel: float = 4.0
    max_jerk: float = 8.0
    w_ttc: float = 5.0
    w_comfort: float = 2.0
    w_ep: float = 5.0
    # distance that earns full ego progress; None means the route length
    ep_reference_length: float | None = None


@dataclass(frozen=True)
class StepRecord:
    tick: int
    time: float
    collision: bool
    on_drivable: bool
    min_ttc: float
    progress: float
    goal_distance: float
    accel: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["min_ttc"] = None if math.isinf(self.min_ttc) else self.min_ttc
        return d

    @classmethod
    def from_dict(cls, d) -> "StepRecord":
        ttc = d["min_ttc"]
        return cls(int(d["tick"]), float(d["time"]), bool(d["collision"]), bool(d["on_drivable"]),
                   math.inf if ttc is None else float(ttc), float(d["progress"]),
                   float(d["goal_distance"]), float(d["accel"]))


def ego_rect(pose: Pose, footprint) -> np.ndarray:
    return rect_corners(pose.x, pose.y, pose.yaw, footprint[0], footprint[1])


def _velocity(pose: Pose, speed: float) -> np.ndarray:
    return np.array([speed * math.cos(pose.yaw), speed * math.sin(pose.yaw)])


def _static_collision(world, rect: np.ndarray, z0: float, z1: float) -> bool:
    g = world.grid
    vs = g.voxel_size
    ox, oy, oz = g.origin
    h, w, d = g.dims
    lo = np.floor((rect.min(axis=0) - (ox, oy)) / vs).astype(int)
    hi = np.floor((rect.max(axis=0) - (ox, oy)) / vs).astype(int)
    i0, j0 = max(lo[0], 0), max(lo[1], 0)
    i1, j1 = min(hi[0], h - 1), min(hi[1], w - 1)
    # voxel layers whose open z-interval meets the ego's
    k0 = max(int(math.floor((z0 - oz) / vs)), 0)
    k1 = min(int(math.ceil((z1 - oz) / vs)) - 1, d - 1)
    if i1 < i0 or j1 < j0 or k1 < k0:
        return False
    block = g.labels[i0 : i1 + 1, j0 : j1 + 1, k0 : k1 + 1]
    solid = ~np.isin(block, _PASSABLE)
    for i, j, k in np.argwhere(solid):
        i, j, k = i + i0, j + j0, k + k0
        if (i, j, k) in world.instance_map:
            continue  # actors are checked by footprint
        vz0, vz1 = oz + k * vs, oz + (k + 1) * vs
        if not (vz0 < z1 and vz1 > z0):
            continue
        cell = np.array([[ox + i * vs, oy + j * vs], [ox + (i + 1) * vs, oy + j * vs],
                         [ox + (i + 1) * vs, oy + (j + 1) * vs], [ox + i * vs, oy + (j + 1) * vs]])
        if rects_overlap(rect, cell):
            return True
    return False


def _on_drivable(world, rect: np.ndarray) -> bool:
    g = world.grid
    drivable = np.any(g.labels == int(Label.DRIVABLE_SURFACE), axis=2)
    for cx, cy in rect:
        i = math.floor((cx - g.origin[0]) / g.voxel_size)
        j = math.floor((cy - g.origin[1]) / g.voxel_size)
        if not (0 <= i < g.dims[0] and 0 <= j < g.dims[1]) or not drivable[i, j]:
            return False
    return True


def step_signals(world, ego_pose: Pose, ego_speed: float, ego_footprint, route: Route,
                 accel: float = 0.0) -> StepRecord:
    """Safety and progress signals for the ego in one composed world.

    The ego is not stamped into ``world``; ``ego_footprint`` is its
    (length, width, height) box standing at ``ego_pose.z``.
    """
    g = world.grid
    ex, ey = ego_pose.x, ego_pose.y
    gx, gy = ex - g.origin[0], ey - g.origin[1]
    if not (0.0 <= gx < g.dims[0] * g.voxel_size and 0.0 <= gy < g.dims[1] * g.voxel_size):
        raise EgoOffGridError(world.tick, ego_pose)
    rect = ego_rect(ego_pose, ego_footprint)
    v_ego = _velocity(ego_pose, ego_speed)
    collision = False
    min_ttc = math.inf
    for inst in world.actors:
        fp = world.footprints[inst.instance_id]
        other = rect_corners(inst.pose.x, inst.pose.y, inst.pose.yaw, fp[0], fp[1])
        t = time_to_contact(rect, v_ego, other, _velocity(inst.pose, inst.speed))
        min_ttc = min(min_ttc, t)
        if t == 0.0:
            collision = True
    if not collision:
        collision = _static_collision(world, rect, ego_pose.z, ego_pose.z + ego_footprint[2])
    if collision:
        min_ttc = 0.0
    return StepRecord(
        tick=int(world.tick),
        time=float(world.time),
        collision=collision,
        on_drivable=_on_drivable(world, rect),
        min_ttc=float(min_ttc),
        progress=route.progress(ex, ey),
        goal_distance=route.goal_distance(ex, ey),
        accel=float(accel),
    )


@dataclass(frozen=True)
class Scores:
    nc: float
    dac: float
    ttc: float
    ep: float
    comfort: float
    pdms: float
    rc: float | None = None
    ads: float | None = None

    @staticmethod
    def pdms_of(nc, dac, ttc, ep, comfort, config: MetricsConfig = MetricsConfig()) -> float:
        wsum = config.w_ttc + config.w_comfort + config.w_ep
        return nc * dac * (config.w_ttc * ttc + config.w_comfort * comfort + config.w_ep * ep) / wsum

    @classmethod
    def compose(cls, nc, dac, ttc, ep, comfort, rc=None, config: MetricsConfig = MetricsConfig()) -> "Scores":
        pdms = cls.pdms_of(nc, dac, ttc, ep, comfort, config)
        return cls(float(nc), float(dac), float(ttc), float(ep), float(comfort), pdms,
                   None if rc is None else float(rc), None if rc is None else pdms * rc)

    def check(self, config: MetricsConfig = MetricsConfig()) -> bool:
        """True iff every field lies in [0, 1] and the composite formulas hold exactly."""
        vals = [v for v in (self.nc, self.dac, self.ttc, self.ep, self.comfort, self.pdms, self.rc, self.ads)
                if v is not None]
        if not all(0.0 <= v <= 1.0 for v in vals):
            return False
        if self.pdms != self.pdms_of(self.nc, self.dac, self.ttc, self.ep, self.comfort, config):
            return False
        if (self.rc is None) != (self.ads is None):
            return False
        return self.rc is None or self.ads == self.pdms * self.rc

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def aggregate(records: Sequence[StepRecord], route: Route, config: MetricsConfig = MetricsConfig(),
              closed_loop: bool = True) -> Scores:
    """Fold per-step records into episode scores."""
    if not records:
        raise MetricsError("cannot aggregate an empty episode")
    nc = 0.0 if any(r.collision for r in records) else 1.0
    dac = 1.0 if all(r.on_drivable for r in records) else 0.0
    ttc = 1.0 if all(r.min_ttc >= config.ttc_threshold for r in records) else 0.0
    comfort = 1.0
    prev = None
    for r in records:
        jerk = 0.0 if prev is None or r.time == prev.time else (r.accel - prev.accel) / (r.time - prev.time)
        if abs(r.accel) > config.max_accel or abs(jerk) > config.max_jerk:
            comfort = 0.0
        prev = r
    last = records[-1]
    ref = route.total_length if config.ep_reference_length is None else config.ep_reference_length
    ep = _clamp01(last.progress / ref)
    rc = None
    if closed_loop:
        rc = 1.0 if last.goal_distance <= route.tolerance else _clamp01(last.progress / route.total_length)
    return Scores.compose(nc, dac, ttc, ep, comfort, rc, config)


def open_loop_eval(trajectory: Sequence[tuple[Pose, float]], worlds: Sequence, route: Route, ego_footprint,
                   config: MetricsConfig = MetricsConfig()) -> Scores:
    """Score a fixed ego trajectory against a replayed world sequence.

    ``trajectory[t]`` is the ego (pose, speed) at ``worlds[t]``; the ego's
    acceleration is taken from backward speed differences.
    """
    if len(trajectory) != len(worlds):
        raise MetricsError(f"trajectory has {len(trajectory)} poses but the replay has {len(worlds)} ticks")
    records = []
    for t, ((pose, speed), world) in enumerate(zip(trajectory, worlds)):
        accel = 0.0
        if t:
            dt = world.time - worlds[t - 1].time
            accel = (speed - trajectory[t - 1][1]) / dt if dt > 0 else 0.0
        records.append(step_signals(world, pose, speed, ego_footprint, route, accel))
    return aggregate(records, route, config, closed_loop=False)


# --- files -------------------------------------------------------------------------

RESULT_KEYS = ("nc", "dac", "ttc", "ep", "comfort", "pdms", "rc", "ads")


def write_results(path, scores: Scores | dict, extra: dict | None = None) -> None:
    """Flat ``key=value`` file; scores first in canonical order, then extras sorted."""
    d = scores.as_dict() if isinstance(scores, Scores) else dict(scores)
    lines = [f"{k}={d[k]!r}" for k in RESULT_KEYS if k in d]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={v}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_results(path) -> dict:
    """Parse a results file; score keys become floats, anything else stays text."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MetricsError(f"{path}:{n}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.lower()
            out[k] = float(v) if k in RESULT_KEYS else v
    return out


def format_report(results: dict, title: str = "") -> str:
    """Two-line table of whichever score fields are present."""
    keys = [k for k in RESULT_KEYS if k in results]
    cells = [format(float(results[k]), ".6g") for k in keys]
    width = [max(len(k), len(c)) for k, c in zip(keys, cells)]
    head = "  ".join(k.upper().ljust(w) for k, w in zip(keys, width))
    body = "  ".join(c.ljust(w) for c, w in zip(cells, width))
    return "\n".join(([title] if title else []) + [head.rstrip(), body.rstrip()])


def records_from_log(path) -> list[StepRecord]:
    """Step records from an episode log (one JSON object per line with a ``signals`` field)."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                if "signals" in rec:
                    out.append(StepRecord.from_dict(rec["signals"]))
    return out


def load_route(path) -> Route:
    """Route from an INI file with a ``[route]`` section (``waypoints = x,y; x,y``)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise MetricsError(f"cannot read route file {path}")
    return route_from_section(cp["route"])


def route_from_section(sec) -> Route:
    pts = [tuple(float(v) for v in p.split(",")) for p in sec["waypoints"].split(";") if p.strip()]
    return Route(pts, float(sec.get("tolerance", 2.0)))
