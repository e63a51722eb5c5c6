"""Closed-loop and open-loop episode runners.

Per tick the closed loop composes the world, renders the rig, sends an
``observe`` record, waits for the agent's ``act``, scores the current state,
then integrates the ego and the environment actors. Controls received at
tick t therefore show up in poses at tick t + 1.
"""
from __future__ import annotations

import base64
import configparser
import json
import logging
import math
import os
import queue
import shlex
import shutil
import socket
import subprocess
import tempfile
import threading
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .actors import ActorBank, ActorInstance, builtin_bank, load_bank
from .compositor import compose_world, world_hash
from .core import BevMap, Label, Pose, SemanticGrid, load_bev, load_grid
from .geometry import rect_corners
from .dynamics import ControlLimits, ControlSignal, IDMParams, LaneGraph, environment_step, integrate_pose, \
    lane_graph_from_bev, spawn_actors
from .metrics import EgoOffGridError, MetricsConfig, Route, Scores, StepRecord, aggregate, open_loop_eval, \
    route_from_section, step_signals
from .projector import CameraRig, default_rig, load_rig, render_rig, rig_from_config, write_image
from .scene import SceneConfig, SceneStyle, build_city, city_bev_of, generate_region, load_layout

log = logging.getLogger(__name__)

SEED_ENV = "OCCSPHERE_SEED"
DEFAULT_TIMEOUT = 10.0

# failure codes
OK = "ok"
AGENT_TIMEOUT = "agent-timeout"
AGENT_FAILURE = "agent-failure"
PROTOCOL_ERROR = "protocol-error"
PROTOCOL_ORDER = "protocol-order"

EXIT_CODES = {OK: 0, AGENT_TIMEOUT: 2, AGENT_FAILURE: 2, PROTOCOL_ERROR: 3, PROTOCOL_ORDER: 3}
EXIT_CONFIG = 4


class ScenarioError(ValueError):
    pass


class AgentTimeout(RuntimeError):
    pass


class AgentFailure(RuntimeError):
    pass


# --- scenario ----------------------------------------------------------------------


@dataclass(eq=False)
class Scenario:
    static: SemanticGrid
    route: Route
    ego_pose: Pose
    ego_speed: float = 0.0
    ego_footprint: tuple[float, float, float] = (4.5, 2.0, 1.5)
    lanes: LaneGraph = field(default_factory=LaneGraph)
    rig: CameraRig = field(default_factory=lambda: default_rig(32, 32))
    bank: ActorBank = field(default_factory=builtin_bank)
    actors: tuple[ActorInstance, ...] = ()
    seed: int = 0
    max_ticks: int = 40
    dt: float = 0.5
    collision_stop: bool = True
    controller: str = "idm"
    idm: IDMParams = IDMParams()
    limits: ControlLimits = ControlLimits()
    metrics: MetricsConfig = MetricsConfig()
    observations: str = "path"
    views: tuple[str, ...] | None = None
    name: str = "scenario"
    static_ref: str = ""

    def __post_init__(self):
        if self.max_ticks < 1:
            raise ScenarioError("max_ticks must be at least 1")
        if not self.dt > 0:
            raise ScenarioError("dt must be positive")
        if self.controller not in ("idm", "constant"):
            raise ScenarioError(f"unknown controller {self.controller!r}")
        if self.observations not in ("path", "inline", "none"):
            raise ScenarioError(f"unknown observation mode {self.observations!r}")
        lo = np.asarray(self.static.origin[:2])
        hi = lo + np.asarray(self.static.dims[:2]) * self.static.voxel_size
        pts = self.route.waypoints
        if np.any(pts < lo) or np.any(pts >= hi):
            raise ScenarioError("route leaves the scene bounds")
        ids = [a.instance_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise ScenarioError("actor instance ids must be unique")
        missing = [a.asset_id for a in self.actors if a.asset_id not in self.bank]
        if missing:
            raise ScenarioError(f"unknown asset ids {missing}")
        if not self.static_ref:
            self.static_ref = "grid#" + world_hash(self.static)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "max_ticks": self.max_ticks,
            "route": self.route.waypoints.tolist(),
            "route_tolerance": self.route.tolerance,
            "ego_footprint": list(self.ego_footprint),
            "static_ref": self.static_ref,
        }


def _resolve(base: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(base, p)


def load_scenario(path, seed: int | None = None) -> Scenario:
    """Read a scenario file (INI sections; see README for every key).

    ``seed`` (or the OCCSPHERE_SEED environment variable) overrides the
    file's seed. Every problem surfaces as :class:`ScenarioError`.
    """
    try:
        return _load_scenario(path, seed)
    except ScenarioError:
        raise
    except (KeyError, ValueError, OSError, configparser.Error) as e:
        raise ScenarioError(f"{path}: {e}") from e


def _load_scenario(path, seed):
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise ScenarioError(f"cannot read scenario file {path}")
    base = os.path.dirname(os.path.abspath(path))
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    if seed is None and os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
    if seed is None:
        seed = int(sc.get("seed", 0))

    # static scene
    scene = cp["scene"] if cp.has_section("scene") else {}
    lane_bev: BevMap | None = None
    if "occ" in scene:
        static = load_grid(_resolve(base, scene["occ"]))
        ref = "occ:" + os.path.basename(scene["occ"])
        if "bev" in scene:
            lane_bev = load_bev(_resolve(base, scene["bev"]))
    elif "layout" in scene:
        layout, style, config, lseed = load_layout(_resolve(base, scene["layout"]))
        static = build_city(layout, style, seed if lseed is None else lseed, config)
        lane_bev = city_bev_of(layout)
        ref = "layout:" + os.path.basename(scene["layout"])
    elif "bev" in scene:
        lane_bev = load_bev(_resolve(base, scene["bev"]))
        config = SceneConfig(height=int(scene.get("height", 16)))
        static = generate_region(lane_bev, SceneStyle(scene.get("style", "open-road")), seed, config)
        ref = "bev:" + os.path.basename(scene["bev"])
    else:
        raise ScenarioError("[scene] needs one of occ, layout or bev")

    lanes_sec = cp["lanes"] if cp.has_section("lanes") else {}
    if "file" in lanes_sec:
        lanes = LaneGraph.load(_resolve(base, lanes_sec["file"]))
    elif lane_bev is not None:
        lanes = lane_graph_from_bev(lane_bev)
    else:
        lanes = LaneGraph()

    rig_sec = cp["rig"] if cp.has_section("rig") else {}
    if "file" in rig_sec:
        rig = load_rig(_resolve(base, rig_sec["file"]))
    else:
        rig = rig_from_config(cp)
    views = tuple(v.strip() for v in rig_sec["views"].split(",")) if "views" in rig_sec else None

    if not cp.has_section("route"):
        raise ScenarioError("missing [route] section")
    route = route_from_section(cp["route"])

    ego = cp["ego"] if cp.has_section("ego") else {}
    ground = static.origin[2] + static.voxel_size
    p0, p1 = route.waypoints[0], route.waypoints[1]
    ego_pose = Pose(
        float(ego.get("x", p0[0])),
        float(ego.get("y", p0[1])),
        float(ego.get("z", ground)),
        float(ego.get("yaw", math.atan2(p1[1] - p0[1], p1[0] - p0[0]))),
    )
    footprint = (float(ego.get("length", 4.5)), float(ego.get("width", 2.0)), float(ego.get("height", 1.5)))

    act = cp["actors"] if cp.has_section("actors") else {}
    bank = load_bank(_resolve(base, act["bank"])) if "bank" in act else builtin_bank(static.voxel_size)
    actors = []
    for key in sorted((k for k in act if k.startswith("place.")), key=lambda k: int(k.split(".", 1)[1])):
        parts = act[key].split()
        if len(parts) != 6:
            raise ScenarioError(f"[actors] {key}: expected 'asset_id x y z yaw speed'")
        x, y, z, yaw, speed = (float(v) for v in parts[1:])
        actors.append(ActorInstance(int(key.split(".", 1)[1]), parts[0], Pose(x, y, z, yaw), speed))
    count = int(act.get("count", 0))
    if count:
        classes = tuple(Label[c.strip().upper().replace("-", "_")] for c in act.get("classes", "car").split(","))
        # keep spawned traffic clear of the ego's start box
        ego_rect = rect_corners(
            ego_pose.x, ego_pose.y, ego_pose.yaw, footprint[0] + 2 * float(act.get("ego_clearance", 6.0)),
            footprint[1])
        first = max((a.instance_id for a in actors), default=0) + 1
        actors += spawn_actors(lanes, bank, count, seed, float(act.get("spacing", 8.0)), classes,
                               ground_z=ground, first_id=first, avoid=[ego_rect])
    idm = IDMParams(speed_jitter=float(act.get("speed_jitter", 0.0)))

    met = cp["metrics"] if cp.has_section("metrics") else {}
    mconf = MetricsConfig(**{k: float(v) for k, v in met.items() if k in MetricsConfig.__dataclass_fields__})

    return Scenario(
        static=static,
        route=route,
        ego_pose=ego_pose,
        ego_speed=float(ego.get("speed", 0.0)),
        ego_footprint=footprint,
        lanes=lanes,
        rig=rig,
        bank=bank,
        actors=tuple(actors),
        seed=seed,
        max_ticks=int(sc.get("max_ticks", 40)),
        dt=float(sc.get("dt", 0.5)),
        collision_stop=str(sc.get("collision_stop", "true")).lower() in ("1", "true", "yes", "on"),
        controller=act.get("controller", "idm"),
        idm=idm,
        metrics=mconf,
        observations=rig_sec.get("observations", "path"),
        views=views,
        name=str(sc.get("name", os.path.splitext(os.path.basename(path))[0])),
        static_ref=ref + "#" + world_hash(static),
    )


# --- agent endpoints ---------------------------------------------------------------


class LineChannel:
    """Line transport with a background reader so receives can time out."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue()
        self._reader = None

    def _start_reader(self, stream):
        def pump():
            try:
                for line in stream:
                    self._q.put(line)
            except (OSError, ValueError):
                pass
            self._q.put(None)

        self._reader = threading.Thread(target=pump, daemon=True)
        self._reader.start()

    def _push(self, line: str | None):
        self._q.put(line)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> str:
        try:
            line = self._q.get(timeout=timeout)
        except queue.Empty:
            raise AgentTimeout(f"no reply within {timeout} s") from None
        if line is None:
            self._q.put(None)
            raise AgentFailure("agent closed its output")
        return line.rstrip("\r\n")

    def pending(self) -> bool:
        """True if an unsolicited line is waiting (end-of-stream does not count)."""
        with self._q.mutex:
            return any(item is not None for item in self._q.queue)

    def send(self, line: str) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SubprocessAgent(LineChannel):
    """Agent process speaking the protocol on its stdin/stdout."""

    def __init__(self, command, cwd=None, env=None):
        super().__init__()
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, cwd=cwd, env=env,
                                         text=True, encoding="utf-8", bufsize=1)
        except OSError as e:
            raise AgentFailure(f"cannot start agent {argv!r}: {e}") from e
        self._start_reader(self.proc.stdout)

    def send(self, line: str) -> None:
        try:
            self.proc.stdin.write(line + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as e:
            raise AgentFailure(f"agent input closed: {e}") from e

    def close(self) -> None:
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


class TcpAgent(LineChannel):
    """Agent listening on a TCP port; one connection per episode."""

    def __init__(self, host: str, port: int, connect_timeout: float = DEFAULT_TIMEOUT):
        super().__init__()
        try:
            self.sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as e:
            raise AgentFailure(f"cannot connect to {host}:{port}: {e}") from e
        self.sock.settimeout(None)
        self._r = self.sock.makefile("r", encoding="utf-8", newline="\n")
        self._w = self.sock.makefile("w", encoding="utf-8", newline="\n")
        self._start_reader(self._r)

    def send(self, line: str) -> None:
        try:
            self._w.write(line + "\n")
            self._w.flush()
        except OSError as e:
            raise AgentFailure(f"connection lost: {e}") from e

    def close(self) -> None:
        for f in (self._w, self._r):
            try:
                f.close()
            except OSError:
                pass
        self.sock.close()


class InProcessAgent(LineChannel):
    """Runs a policy object in this process, still through the text codec.

    The policy needs ``reply(line) -> str | None``; see
    :class:`occsphere.agents.PolicyServer`.
    """

    def __init__(self, server):
        super().__init__()
        self.server = server

    def send(self, line: str) -> None:
        out = self.server.reply(line)
        if out is not None:
            self._push(out)


def connect(agent: str, cwd=None) -> LineChannel:
    """``tcp://host:port`` connects over TCP; anything else is a command line."""
    if agent.startswith("tcp://"):
        host, _, port = agent[len("tcp://"):].rpartition(":")
        return TcpAgent(host or "127.0.0.1", int(port))
    return SubprocessAgent(agent, cwd=cwd)


# --- episodes ----------------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class EpisodeLog:
    """Per-tick trace plus the outcome of one episode."""

    scenario: str
    seed: int
    entries: list = field(default_factory=list)
    failure: str = OK
    termination: str = "max-ticks"
    detail: str = ""
    scores: Scores | None = None

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.failure]

    @property
    def records(self) -> list[StepRecord]:
        return [StepRecord.from_dict(e["signals"]) for e in self.entries]

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "ticks": len(self.entries),
            "failure": self.failure,
            "termination": self.termination,
            "detail": self.detail,
            "scores": None if self.scores is None else self.scores.as_dict(),
        }

    def to_jsonl(self) -> str:
        lines = [_dumps(e) for e in self.entries]
        lines.append(_dumps({"summary": self.summary()}))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())

    def trajectory(self) -> list[tuple[Pose, float]]:
        return [(Pose(e["ego"]["x"], e["ego"]["y"], e["ego"]["z"], e["ego"]["yaw"]), e["ego"]["speed"])
                for e in self.entries]


def _ego_dict(pose: Pose, speed: float) -> dict:
    return {"x": pose.x, "y": pose.y, "z": pose.z, "yaw": pose.yaw, "speed": speed}


def _view_infos(rig: CameraRig, names, images=None, paths=None, inline=False) -> tuple:
    out = []
    for n in names:
        cam = rig[n]
        labels = depth = ""
        enc = "path"
        if images is not None and inline:
            img = images[n]
            labels = base64.b64encode(img.labels.tobytes()).decode("ascii")
            depth = base64.b64encode(img.depth.astype("<f4").tobytes()).decode("ascii")
            enc = "base64"
        elif paths is not None:
            labels, depth = paths[n]
        out.append(protocol.ViewInfo(n, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                                     tuple(map(tuple, cam.rotation.tolist())), tuple(cam.translation.tolist()),
                                     labels, depth, enc))
    return tuple(out)


def _inside(grid: SemanticGrid, pose: Pose) -> bool:
    gx = (pose.x - grid.origin[0]) / grid.voxel_size
    gy = (pose.y - grid.origin[1]) / grid.voxel_size
    return 0.0 <= gx < grid.dims[0] and 0.0 <= gy < grid.dims[1]


def _advance_actors(scn: Scenario, world, actors, ego_pose: Pose, ego_speed: float) -> list[ActorInstance]:
    if scn.controller == "idm":
        ctrl = environment_step(world, scn.lanes, scn.seed, scn.idm, ego=(ego_pose, ego_speed, scn.ego_footprint))
    else:
        ctrl = {}
    moved = []
    for a in actors:
        c = ctrl.get(a.instance_id, ControlSignal())
        pose, speed = integrate_pose(a.pose, a.speed, c, scn.dt)
        if _inside(scn.static, pose):
            moved.append(a.moved(pose, speed))
        else:
            log.info("actor %d left the grid; despawned", a.instance_id)
    return moved


def run_closed_loop(scn: Scenario, agent: LineChannel, out_dir=None, workers: int = 1,
                    timeout: float = DEFAULT_TIMEOUT) -> tuple[EpisodeLog, Scores | None]:
    """Run one lockstep episode against ``agent``.

    Agent problems end the episode with a failure code; the log keeps every
    completed tick and the scores cover those ticks.
    """
    ep = EpisodeLog(scn.name, scn.seed)
    names = scn.rig.names if scn.views is None else [n for n in scn.rig.names if n in scn.views]
    if scn.views is not None and len(names) != len(scn.views):
        raise ScenarioError(f"unknown view(s) in {scn.views}")
    tmp = None
    if scn.observations == "path":
        if out_dir is None:
            tmp = out_dir = tempfile.mkdtemp(prefix="occsphere-obs-")
        os.makedirs(out_dir, exist_ok=True)
    sent = received = 0
    ego_pose, ego_speed = scn.ego_pose, scn.ego_speed
    actors = list(scn.actors)
    try:
        try:
            init = protocol.InitMsg(scn.dt, scn.summary(), _view_infos(scn.rig, names))
            agent.send(protocol.encode(init))
        except AgentFailure as e:
            ep.failure, ep.detail = AGENT_FAILURE, str(e)
        for t in range(scn.max_ticks if ep.failure == OK else 0):
            world = compose_world(scn.static, actors, scn.bank, t, t * scn.dt, scn.static_ref)
            images = paths = None
            if scn.observations != "none":
                images = render_rig(world, scn.rig, ego_pose, names, workers=workers)
                if scn.observations == "path":
                    paths = {n: write_image(images[n], os.path.join(out_dir, f"t{t:05d}_{n}")) for n in names}
            obs = protocol.ObserveMsg(t, t * scn.dt, protocol.EgoState(ego_pose.x, ego_pose.y, ego_pose.z,
                                                                       ego_pose.yaw, ego_speed),
                                      _view_infos(scn.rig, names, images, paths, scn.observations == "inline"))
            if agent.pending():
                ep.failure, ep.detail = PROTOCOL_ORDER, f"unsolicited message before observe {t}"
                break
            try:
                agent.send(protocol.encode(obs))
                sent += 1
                line = agent.recv(timeout)
                received += 1
            except AgentTimeout as e:
                ep.failure, ep.detail = AGENT_TIMEOUT, f"tick {t}: {e}"
                break
            except AgentFailure as e:
                ep.failure, ep.detail = AGENT_FAILURE, f"tick {t}: {e}"
                break
            assert sent - received in (0, 1)
            try:
                msg = protocol.decode(line)
            except protocol.ProtocolError as e:
                ep.failure, ep.detail = PROTOCOL_ERROR, f"tick {t}: {e}"
                break
            if not isinstance(msg, protocol.ActMsg) or (msg.tick is not None and msg.tick != t):
                ep.failure, ep.detail = PROTOCOL_ORDER, f"tick {t}: expected act, got {line[:80]!r}"
                break
            raw = ControlSignal(msg.accel, msg.yaw_rate)
            c = raw.clamp(scn.limits)
            try:
                rec = step_signals(world, ego_pose, ego_speed, scn.ego_footprint, scn.route, c.accel)
            except EgoOffGridError as e:
                ep.termination, ep.detail = "ego-off-grid", str(e)
                break
            ep.entries.append({
                "tick": t,
                "time": t * scn.dt,
                "world_hash": world_hash(world.grid),
                "ego": _ego_dict(ego_pose, ego_speed),
                "control": {"accel": c.accel, "yaw_rate": c.yaw_rate},
                "raw_control": {"accel": raw.accel, "yaw_rate": raw.yaw_rate},
                "actors": [[a.instance_id, a.pose.x, a.pose.y, a.pose.z, a.pose.yaw, a.speed] for a in world.actors],
                "conflicts": len(world.static_conflicts) + len(world.actor_conflicts),
                "signals": rec.to_dict(),
            })
            if rec.collision and scn.collision_stop:
                ep.termination = "collision"
                break
            if rec.goal_distance <= scn.route.tolerance:
                ep.termination = "route-complete"
                break
            new_actors = _advance_actors(scn, world, actors, ego_pose, ego_speed)
            ego_pose, ego_speed = integrate_pose(ego_pose, ego_speed, c, scn.dt)
            actors = new_actors
        if ep.failure != OK:
            ep.termination = "failure"
        ep.scores = aggregate(ep.records, scn.route, scn.metrics) if ep.entries else None
        try:
            reason = ep.failure if ep.failure != OK else ep.termination
            agent.send(protocol.encode(protocol.EndMsg(reason, ep.scores.as_dict() if ep.scores else {})))
        except AgentFailure:
            pass
    finally:
        agent.close()
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return ep, ep.scores


def replay_worlds(scn: Scenario, trajectory: Sequence[tuple[Pose, float]]) -> list:
    """Worlds of an episode whose ego follows ``trajectory`` without feedback."""
    actors = list(scn.actors)
    worlds = []
    for t, (pose, speed) in enumerate(trajectory):
        world = compose_world(scn.static, actors, scn.bank, t, t * scn.dt, scn.static_ref)
        worlds.append(world)
        if t + 1 < len(trajectory):
            actors = _advance_actors(scn, world, actors, pose, speed)
    return worlds


def run_open_loop(scn: Scenario, trajectory: Sequence[tuple[Pose, float]]) -> Scores:
    """Score a predicted ego trajectory (one state per tick) against the replayed environment."""
    if len(trajectory) != scn.max_ticks:
        raise ScenarioError(f"trajectory has {len(trajectory)} states, scenario expects {scn.max_ticks}")
    worlds = replay_worlds(scn, trajectory)
    return open_loop_eval(trajectory, worlds, scn.route, scn.ego_footprint, scn.metrics)


def load_trajectory(path) -> list[tuple[Pose, float]]:
    """Whitespace table, one ``x y z yaw speed`` row per tick; ``#`` starts a comment."""
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = line.split()
            if len(vals) != 5:
                raise ScenarioError(f"{path}:{n}: expected 5 columns, got {len(vals)}")
            x, y, z, yaw, speed = (float(v) for v in vals)
            out.append((Pose(x, y, z, yaw), speed))
    return out


def save_trajectory(traj: Sequence[tuple[Pose, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# x y z yaw speed\n")
        for p, v in traj:
            f.write(f"{p.x!r} {p.y!r} {p.z!r} {p.yaw!r} {float(v)!r}\n")
