"""Newline-delimited JSON messages exchanged with the ego agent.

Every message is one UTF-8 line holding a JSON object with a ``type`` field
(``init``, ``observe``, ``act`` or ``end``). Encoding is canonical: keys are
sorted, separators compact, floats in shortest round-trip form. Decoding
ignores unknown fields.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


class ProtocolError(ValueError):
    pass


def _reject_constant(name):
    raise ProtocolError(f"non-finite number {name} in message")


def _num(d: dict, key: str, where: str) -> float:
    if key not in d:
        raise ProtocolError(f"{where}: missing field {key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ProtocolError(f"{where}: field {key!r} must be numeric, got {v!r}")
    if not math.isfinite(v):
        raise ProtocolError(f"{where}: field {key!r} is not finite")
    return float(v)


def _int(d: dict, key: str, where: str) -> int:
    v = d.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ProtocolError(f"{where}: field {key!r} must be an integer, got {v!r}")
    return v


def _str(d: dict, key: str, where: str) -> str:
    v = d.get(key)
    if not isinstance(v, str):
        raise ProtocolError(f"{where}: field {key!r} must be a string, got {v!r}")
    return v


def _obj(d: dict, key: str, where: str) -> dict:
    v = d.get(key)
    if not isinstance(v, dict):
        raise ProtocolError(f"{where}: field {key!r} must be an object")
    return v


@dataclass(frozen=True)
class ViewInfo:
    """Camera description; ``labels``/``depth`` are file paths or base64 rasters."""

    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: tuple = ()
    translation: tuple = ()
    labels: str = ""
    depth: str = ""
    encoding: str = "path"

    def to_dict(self) -> dict:
        d = {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
             "width": self.width, "height": self.height, "encoding": self.encoding}
        if self.rotation:
            d["rotation"] = [list(r) for r in self.rotation]
        if self.translation:
            d["translation"] = list(self.translation)
        if self.labels:
            d["labels"] = self.labels
        if self.depth:
            d["depth"] = self.depth
        return d

    @classmethod
    def from_dict(cls, d) -> "ViewInfo":
        w = "view"
        if not isinstance(d, dict):
            raise ProtocolError("view entries must be objects")
        rot = d.get("rotation", [])
        tr = d.get("translation", [])
        try:
            rot = tuple(tuple(float(x) for x in row) for row in rot)
            tr = tuple(float(x) for x in tr)
        except (TypeError, ValueError):
            raise ProtocolError("view rotation/translation must be numeric") from None
        enc = d.get("encoding", "path")
        if enc not in ("path", "base64"):
            raise ProtocolError(f"unknown raster encoding {enc!r}")
        return cls(_str(d, "name", w), _num(d, "fx", w), _num(d, "fy", w), _num(d, "cx", w), _num(d, "cy", w),
                   _int(d, "width", w), _int(d, "height", w), rot, tr,
                   str(d.get("labels", "")), str(d.get("depth", "")), enc)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    z: float
    yaw: float
    speed: float

    def to_dict(self):
        return {"x": self.x, "y": self.y, "z": self.z, "yaw": self.yaw, "speed": self.speed}

    @classmethod
    def from_dict(cls, d) -> "EgoState":
        return cls(*(_num(d, k, "ego") for k in ("x", "y", "z", "yaw", "speed")))


@dataclass(frozen=True)
class InitMsg:
    dt: float
    scenario: dict = field(default_factory=dict)
    rig: tuple[ViewInfo, ...] = ()

    type = "init"

    def to_dict(self):
        return {"type": "init", "dt": self.dt, "scenario": self.scenario, "rig": [v.to_dict() for v in self.rig]}


@dataclass(frozen=True)
class ObserveMsg:
    tick: int
    time: float
    ego: EgoState
    views: tuple[ViewInfo, ...] = ()

    type = "observe"

    def to_dict(self):
        return {"type": "observe", "tick": self.tick, "time": self.time, "ego": self.ego.to_dict(),
                "views": [v.to_dict() for v in self.views]}


@dataclass(frozen=True)
class ActMsg:
    accel: float
    yaw_rate: float
    tick: int | None = None

    type = "act"

    def to_dict(self):
        d = {"type": "act", "accel": self.accel, "yaw_rate": self.yaw_rate}
        if self.tick is not None:
            d["tick"] = self.tick
        return d


@dataclass(frozen=True)
class EndMsg:
    reason: str = "ok"
    scores: dict = field(default_factory=dict)

    type = "end"

    def to_dict(self):
        return {"type": "end", "reason": self.reason, "scores": self.scores}


def encode(msg) -> str:
    """One canonical JSON line, without the trailing newline."""
    try:
        return json.dumps(msg.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False,
                          ensure_ascii=False)
    except ValueError as e:
        raise ProtocolError(f"cannot encode {msg.type} message: {e}") from None


def decode(line: str | bytes):
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("message is not valid UTF-8") from None
    try:
        d = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"malformed JSON: {e.msg}") from None
    if not isinstance(d, dict):
        raise ProtocolError("message must be a JSON object")
    kind = d.get("type")
    if kind == "act":
        tick = d.get("tick")
        if tick is not None:
            tick = _int(d, "tick", "act")
        return ActMsg(_num(d, "accel", "act"), _num(d, "yaw_rate", "act"), tick)
    if kind == "observe":
        views = d.get("views", [])
        if not isinstance(views, list):
            raise ProtocolError("observe: views must be a list")
        return ObserveMsg(_int(d, "tick", "observe"), _num(d, "time", "observe"),
                          EgoState.from_dict(_obj(d, "ego", "observe")),
                          tuple(ViewInfo.from_dict(v) for v in views))
    if kind == "init":
        rig = d.get("rig", [])
        if not isinstance(rig, list):
            raise ProtocolError("init: rig must be a list")
        scen = d.get("scenario", {})
        if not isinstance(scen, dict):
            raise ProtocolError("init: scenario must be an object")
        return InitMsg(_num(d, "dt", "init"), scen, tuple(ViewInfo.from_dict(v) for v in rig))
    if kind == "end":
        scores = d.get("scores", {})
        if not isinstance(scores, dict):
            raise ProtocolError("end: scores must be an object")
        return EndMsg(str(d.get("reason", "ok")), scores)
    raise ProtocolError(f"unknown message type {kind!r}")
