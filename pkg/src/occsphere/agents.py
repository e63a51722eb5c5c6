"""Scripted ego agents speaking the lockstep protocol.

Run one on stdio with ``python -m occsphere.agents <kind> [options]``; the
harness launches it via ``sim closed-loop --agent "<command>"``.
"""
from __future__ import annotations

import argparse
import math
import socket
import sys
from collections.abc import Sequence

import numpy as np

from . import protocol
from .core import Pose
from .dynamics import ControlLimits, ControlSignal, integrate_pose, pure_pursuit
from .metrics import Route


class Policy:
    """Maps observations to controls. Subclasses override :meth:`act`."""

    def reset(self, init: protocol.InitMsg) -> None:
        pass

    def act(self, obs: protocol.ObserveMsg):
        raise NotImplementedError


class ZeroPolicy(Policy):
    def act(self, obs):
        return ControlSignal(0.0, 0.0)


class ConstantPolicy(Policy):
    def __init__(self, accel: float = 0.0, yaw_rate: float = 0.0):
        self.control = ControlSignal(accel, yaw_rate)

    def act(self, obs):
        return self.control


class ReplayPolicy(Policy):
    """Plays back a fixed control list, then holds zero."""

    def __init__(self, controls: Sequence[ControlSignal]):
        self.controls = list(controls)

    def act(self, obs):
        return self.controls[obs.tick] if obs.tick < len(self.controls) else ControlSignal(0.0, 0.0)


class RandomPolicy(Policy):
    """Seeded uniform controls; the draw for tick t depends only on (seed, t)."""

    def __init__(self, seed: int, max_accel: float = 2.0, max_yaw_rate: float = 0.2):
        self.seed = int(seed)
        self.max_accel = max_accel
        self.max_yaw_rate = max_yaw_rate

    def act(self, obs):
        u = np.random.default_rng([self.seed, obs.tick]).uniform(-1.0, 1.0, size=2)
        return ControlSignal(float(u[0]) * self.max_accel, float(u[1]) * self.max_yaw_rate)


class FaultyPolicy(Policy):
    """Wraps a policy and misbehaves at one tick (malformed reply, silence or a wrong message)."""

    def __init__(self, inner: Policy, at: int, mode: str = "malformed"):
        if mode not in ("malformed", "silent", "order", "nan"):
            raise ValueError(f"unknown fault mode {mode!r}")
        self.inner, self.at, self.mode = inner, at, mode

    def reset(self, init):
        self.inner.reset(init)

    def act(self, obs):
        if obs.tick != self.at:
            return self.inner.act(obs)
        if self.mode == "malformed":
            return '{"type":"act","accel":'
        if self.mode == "nan":
            return '{"type":"act","accel":"NaN","yaw_rate":0}'
        if self.mode == "order":
            return protocol.encode(protocol.EndMsg("bye"))
        return None


class PolicyServer:
    """Decodes harness lines, drives a policy and encodes its replies."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self.done = False

    def reply(self, line: str) -> str | None:
        msg = protocol.decode(line)
        if isinstance(msg, protocol.InitMsg):
            self.policy.reset(msg)
            return None
        if isinstance(msg, protocol.EndMsg):
            self.done = True
            return None
        if isinstance(msg, protocol.ObserveMsg):
            out = self.policy.act(msg)
            if out is None or isinstance(out, str):
                return out
            return protocol.encode(protocol.ActMsg(out.accel, out.yaw_rate, msg.tick))
        return None


def serve(policy: Policy, infile, outfile) -> None:
    server = PolicyServer(policy)
    for line in infile:
        if not line.strip():
            continue
        out = server.reply(line)
        if out is not None:
            outfile.write(out + "\n")
            outfile.flush()
        if server.done:
            break


def track_route(route: Route, start: Pose, start_speed: float, dt: float, ticks: int, cruise: float = 5.0,
                accel: float = 1.0, lookahead: float = 4.0, limits: ControlLimits = ControlLimits()
                ) -> list[ControlSignal]:
    """Controls that drive the unicycle along ``route`` and stop at its end.

    Forward-simulates the ego with pure pursuit on the route polyline and a
    bounded-acceleration speed profile that brakes in time for the goal.
    """
    pose, speed = start, start_speed
    out = []
    for _ in range(ticks):
        s = route.progress(pose.x, pose.y)
        remaining = route.total_length - s
        # fastest speed from which a comfortable stop still fits
        v_target = min(cruise, math.sqrt(max(0.0, 2.0 * accel * max(remaining - 0.5, 0.0))))
        a = min(max((v_target - speed) / dt, -accel * 2.0), accel)
        ld = max(lookahead, speed * dt * 2.0)
        target = route.line.point_at(s + ld)
        w = pure_pursuit(pose, max(speed, 0.1), target, ld)
        c = ControlSignal(a, w).clamp(limits)
        out.append(c)
        pose, speed = integrate_pose(pose, speed, c, dt)
    return out


def load_controls(path) -> list[ControlSignal]:
    """Two columns per line: accel yaw_rate."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                a, w = line.split()
                out.append(ControlSignal(float(a), float(w)))
    return out


def save_controls(controls: Sequence[ControlSignal], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("# accel yaw_rate\n")
        for c in controls:
            f.write(f"{c.accel!r} {c.yaw_rate!r}\n")


def _policy_from_args(args) -> Policy:
    if args.kind == "zero":
        p = ZeroPolicy()
    elif args.kind == "constant":
        p = ConstantPolicy(args.accel, args.yaw_rate)
    elif args.kind == "replay":
        p = ReplayPolicy(load_controls(args.controls))
    else:
        p = RandomPolicy(args.seed)
    if args.fault_at is not None:
        p = FaultyPolicy(p, args.fault_at, args.fault)
    return p


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m occsphere.agents", description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=["zero", "constant", "replay", "random"])
    ap.add_argument("--accel", type=float, default=0.0)
    ap.add_argument("--yaw-rate", type=float, default=0.0)
    ap.add_argument("--controls", help="control file for the replay agent")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fault-at", type=int, help="misbehave at this tick")
    ap.add_argument("--fault", default="malformed", choices=["malformed", "silent", "order", "nan"])
    ap.add_argument("--listen", type=int, help="serve one TCP connection on this port instead of stdio")
    args = ap.parse_args(argv)
    if args.kind == "replay" and not args.controls:
        ap.error("replay needs --controls")
    policy = _policy_from_args(args)
    if args.listen is None:
        serve(policy, sys.stdin, sys.stdout)
        return 0
    with socket.create_server(("127.0.0.1", args.listen)) as srv:
        conn, _ = srv.accept()
        with conn, conn.makefile("r", encoding="utf-8") as r, conn.makefile("w", encoding="utf-8") as w:
            serve(policy, r, w)
    return 0


if __name__ == "__main__":
    sys.exit(main())
