"""``sim`` command line."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import kernels
from .actors import BankError, ActorBank, builtin_bank, import_asset, load_bank, save_bank
from .compositor import world_hash
from .core import CodecError, Label, Pose, load_bev, load_grid, save_bev, save_grid
from .harness import AGENT_FAILURE, EXIT_CODES, EXIT_CONFIG, AgentFailure, ScenarioError, connect, load_scenario, load_trajectory, replay_worlds, \
    run_closed_loop, run_open_loop, save_trajectory
from .metrics import MetricsError, aggregate, format_report, load_route, read_results, records_from_log, \
    write_results
from .projector import CameraError, load_rig, render_rig, write_image
from .scene import SceneConfig, SceneError, SceneStyle, build_city, expand_region, generate_region, load_layout, \
    overlap_mask, road_grid_bev

log = logging.getLogger("occsphere")

CONFIG_ERRORS = (ScenarioError, SceneError, CodecError, BankError, MetricsError, CameraError, OSError, KeyError,
                 ValueError)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def cmd_gen_bev(args) -> int:
    bev = road_grid_bev(_ints(args.dims), args.cell_size, _floats(args.origin), _ints(args.roads_x),
                        _ints(args.roads_y), args.road_width)
    save_bev(bev, args.out)
    print(f"wrote {args.out} {bev.dims}")
    return 0


def cmd_gen_scene(args) -> int:
    bev = load_bev(args.bev)
    grid = generate_region(bev, SceneStyle(args.style), args.seed, SceneConfig(height=args.height))
    save_grid(grid, args.out)
    print(f"wrote {args.out} {grid.dims} hash={world_hash(grid)}")
    return 0


def cmd_expand(args) -> int:
    s_k = load_grid(args.scene)
    bev = load_bev(args.bev)
    o = overlap_mask(s_k, bev)
    grid = expand_region(s_k, o, bev, SceneStyle(args.style), args.seed, SceneConfig(height=s_k.dims[2]))
    save_grid(grid, args.out)
    print(f"wrote {args.out} {grid.dims} band voxels={int(o.bits.sum())}")
    return 0


def cmd_build_city(args) -> int:
    layout, style, config, seed = load_layout(args.layout)
    if args.style:
        style = SceneStyle(args.style)
    seed = args.seed if args.seed is not None else (seed or 0)
    city = build_city(layout, style, seed, config)
    save_grid(city, args.out)
    print(f"wrote {args.out} {city.dims} hash={world_hash(city)}")
    return 0


def cmd_render(args) -> int:
    grid = load_grid(args.world)
    rig = load_rig(args.rig)
    x, y, z, yaw = _floats(args.pose)
    os.makedirs(args.out_dir, exist_ok=True)
    views = args.views.split(",") if args.views else None
    images = render_rig(grid, rig, Pose(x, y, z, yaw), views, workers=args.workers)
    for name, img in images.items():
        pgm, _ = write_image(img, os.path.join(args.out_dir, name))
        print(pgm)
    return 0


def cmd_compose(args) -> int:
    scn = load_scenario(args.scenario, args.seed)
    if args.scene:
        scn.static = load_grid(args.scene)
    if args.tick < 0:
        raise ScenarioError("tick must be non-negative")
    hold = [(scn.ego_pose, 0.0)] * (args.tick + 1)
    world = replay_worlds(scn, hold)[-1]
    save_grid(world.grid, args.out)
    print(f"wrote {args.out} tick={world.tick} actors={len(world.actors)} hash={world_hash(world.grid)}")
    return 0


def cmd_closed_loop(args) -> int:
    scn = load_scenario(args.scenario, args.seed)
    if args.observations:
        scn.observations = args.observations
    kernels.set_num_threads(args.threads)
    out = args.out
    obs_dir = None
    if out:
        os.makedirs(out, exist_ok=True)
        obs_dir = os.path.join(out, "obs")
    try:
        agent = connect(args.agent)
    except AgentFailure as e:
        print(f"failure={AGENT_FAILURE} detail: {e}", file=sys.stderr)
        return EXIT_CODES[AGENT_FAILURE]
    ep, scores = run_closed_loop(scn, agent, obs_dir, workers=args.workers, timeout=args.timeout)
    if out:
        ep.write(os.path.join(out, "episode.jsonl"))
        save_trajectory(ep.trajectory(), os.path.join(out, "trajectory.txt"))
        extra = {"failure": ep.failure, "termination": ep.termination, "ticks": len(ep.entries)}
        write_results(os.path.join(out, "results.txt"), scores.as_dict() if scores else {}, extra)
    print(f"failure={ep.failure} termination={ep.termination} ticks={len(ep.entries)}")
    if ep.detail:
        print(f"detail: {ep.detail}", file=sys.stderr)
    if scores:
        print(format_report(scores.as_dict()))
    return ep.exit_code


def cmd_open_loop(args) -> int:
    scn = load_scenario(args.scenario, args.seed)
    traj = load_trajectory(args.traj)
    scores = run_open_loop(scn, traj)
    if args.out:
        write_results(args.out, scores)
    print(format_report(scores.as_dict()))
    return 0


def cmd_eval(args) -> int:
    records = records_from_log(args.log)
    route = load_route(args.route)
    scores = aggregate(records, route, closed_loop=not args.open_loop)
    if args.out:
        write_results(args.out, scores)
    print(format_report(scores.as_dict()))
    return 0


def cmd_report(args) -> int:
    print(format_report(read_results(args.results), args.title))
    return 0


def cmd_bank_init(args) -> int:
    save_bank(builtin_bank(args.voxel_size), args.bank)
    print(f"wrote built-in bank to {args.bank}")
    return 0


def cmd_bank_import(args) -> int:
    bank = load_bank(args.bank) if os.path.exists(os.path.join(args.bank, "manifest.tsv")) else ActorBank()
    bank = import_asset(bank, load_grid(args.grid), args.id, Label[args.cls.upper().replace("-", "_")],
                        args.caption)
    save_bank(bank, args.bank)
    print(f"imported {args.id} ({len(bank)} assets)")
    return 0


def cmd_bank_list(args) -> int:
    for a in load_bank(args.bank).values():
        l, w, h = a.footprint
        print(f"{a.asset_id}\t{a.label.name.lower()}\t{l:g}x{w:g}x{h:g}\t{a.voxel_count}\t{a.caption}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description="Semantic occupancy driving world simulator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-bev", help="write a procedural road-grid BEV map")
    p.add_argument("--dims", required=True, help="H,W in cells")
    p.add_argument("--cell-size", type=float, default=0.5)
    p.add_argument("--origin", default="0,0")
    p.add_argument("--roads-x", default="", help="cell rows of roads running along y")
    p.add_argument("--roads-y", default="", help="cell columns of roads running along x")
    p.add_argument("--road-width", type=int, default=14)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_bev)

    p = sub.add_parser("gen-scene", help="generate one region from a BEV map")
    p.add_argument("--bev", required=True)
    p.add_argument("--style", default="suburban-vegetation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("expand", help="generate the next region, conditioned on the overlap")
    p.add_argument("--scene", required=True)
    p.add_argument("--bev", required=True, help="BEV of the next region (world-placed)")
    p.add_argument("--style", default="suburban-vegetation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("build-city", help="fold regions of a layout into one city grid")
    p.add_argument("--layout", required=True)
    p.add_argument("--style")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_city)

    p = sub.add_parser("render", help="render a rig into .pgm/.dep images")
    p.add_argument("--world", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--pose", default="0,0,0,0", help="ego x,y,z,yaw")
    p.add_argument("--views")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compose", help="write the composed world of one tick")
    p.add_argument("--scenario", required=True)
    p.add_argument("--scene", help="override the scenario's static scene")
    p.add_argument("--tick", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("closed-loop", help="run an episode against an external agent")
    p.add_argument("--scenario", required=True)
    p.add_argument("--agent", required=True, help='agent command line, or tcp://host:port')
    p.add_argument("--out", help="directory for episode.jsonl, results.txt, trajectory.txt, obs/")
    p.add_argument("--seed", type=int)
    p.add_argument("--timeout", type=float, default=10.0, help="seconds per tick")
    p.add_argument("--workers", type=int, default=1, help="render threads")
    p.add_argument("--threads", type=int, help="kernel threads")
    p.add_argument("--observations", choices=["path", "inline", "none"])
    p.set_defaults(func=cmd_closed_loop)

    p = sub.add_parser("open-loop", help="score a fixed ego trajectory")
    p.add_argument("--scenario", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_open_loop)

    p = sub.add_parser("eval", help="recompute scores from an episode log")
    p.add_argument("--log", required=True)
    p.add_argument("--route", required=True)
    p.add_argument("--open-loop", action="store_true", help="omit rc/ads")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="pretty-print a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_report)

    bank = sub.add_parser("actor-bank", help="manage actor banks")
    bsub = bank.add_subparsers(dest="bank_command", required=True)
    p = bsub.add_parser("init", help="write the built-in bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--voxel-size", type=float, default=0.5)
    p.set_defaults(func=cmd_bank_init)
    p = bsub.add_parser("import", help="add a segmented .occ4 as an asset")
    p.add_argument("--bank", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--class", dest="cls", required=True)
    p.add_argument("--caption", required=True)
    p.set_defaults(func=cmd_bank_import)
    p = bsub.add_parser("list", help="list assets")
    p.add_argument("--bank", required=True)
    p.set_defaults(func=cmd_bank_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as e:
        print(f"sim: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
