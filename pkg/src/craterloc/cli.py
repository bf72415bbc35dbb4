"""Command-line front end: ``craterloc {scene,detect,traverse,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Outputs go to
``--out-dir``, which defaults to ``$CRATERLOC_OUT_DIR`` or the current
directory. Every artifact records the seed that produced it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod

OUT_DIR_ENV = "CRATERLOC_OUT_DIR"
PRESETS = ("full-sweep",)


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pose(text: str) -> tuple[float, float, float]:
    v = _floats(text)
    if len(v) != 3:
        raise argparse.ArgumentTypeError("pose must be x,y,heading_rad")
    return (v[0], v[1], v[2])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- scene

def cmd_scene(args, cfgs) -> int:
    from .landmarks import db_from_scene
    from .ply import write_ply
    from .sensors import simulate_lidar, simulate_stereo
    from .terrain import SWEEP_APPROACHES, SWEEP_DIAMETERS, SWEEP_RANGES, approach_scene

    out = args.out_dir
    if args.preset == "full-sweep":
        scenes = [{"name": f"d{d:g}_r{r:g}_a{a:g}", "diameter_m": d, "range_m": r, "approach_deg": a,
                   "seed": args.seed}
                  for d in SWEEP_DIAMETERS for r in SWEEP_RANGES for a in SWEEP_APPROACHES]
        path = out / "manifest.json"
        _write_json(path, {"preset": args.preset, "seed": args.seed, "cell_size_m": args.cell_size,
                           "roughness_m": args.roughness, "scenes": scenes})
        print(f"wrote {path} ({len(scenes)} scenes)")
        return 0
    if args.diameter is None or args.range is None:
        raise UsageError("scene needs --diameter and --range (or --preset)")
    scene = approach_scene(args.diameter, args.range, args.approach, seed=args.seed,
                           cell_size=args.cell_size, roughness=args.roughness)
    stem = out / (args.name or f"scene_d{args.diameter:g}_r{args.range:g}_a{args.approach:g}_s{args.seed}")
    scene.save(stem)
    written = [f"{stem}_dem.f32", f"{stem}_dem.json", f"{stem}_truth.json"]
    db = db_from_scene(scene, args.map_sigma, seed=args.seed)
    db.save(f"{stem}_db.jsonl")
    written.append(f"{stem}_db.jsonl")
    if args.lidar:
        cloud = simulate_lidar(scene, cfgs["lidar_sensor"], args.seed)
        write_ply(f"{stem}_lidar.ply", cloud)
        written.append(f"{stem}_lidar.ply")
    if args.stereo:
        dmap, _ = simulate_stereo(scene, cfgs["stereo_sensor"], args.seed)
        dmap.save(f"{stem}_disparity")
        written += [f"{stem}_disparity.f32", f"{stem}_disparity.json"]
    for w in written:
        print(f"wrote {w}")
    return 0


# ---------------------------------------------------------------- detect

def _pose_for(args, input_path: Path):
    if args.pose is not None:
        return args.pose
    # a scene stem's truth file sits next to its scans
    stem = input_path.name.rsplit("_", 1)[0]
    truth = input_path.parent / f"{stem}_truth.json"
    if truth.exists():
        p = json.loads(truth.read_text())["rover_pose"]
        return (p["x_m"], p["y_m"], p["heading_rad"])
    raise UsageError(f"no --pose given and no {truth.name} next to the input")


def cmd_detect(args, cfgs) -> int:
    from .detections import write_detections
    from .landmarks import LandmarkDb

    inp = Path(args.input)
    if not inp.exists():
        raise FileNotFoundError(f"input {inp} not found")
    if args.method == "lidar":
        from .lidar_detector import detect_lidar
        from .ply import read_ply
        from .state import RoverState

        if args.db is None:
            raise UsageError("--method lidar needs --db (the detector matches against map candidates)")
        cloud = read_ply(inp)
        db = LandmarkDb.load(args.db)
        pose = _pose_for(args, inp)
        prior = RoverState.at(pose[0], pose[1], pose[2], args.prior_sigma)
        dets = detect_lidar(cloud, prior, db, cfgs["lidar_detector"])
    else:
        from .sensors import DisparityMap
        from .stereo_detector import detect_stereo

        sidecar = inp.with_suffix(".json")
        if inp.suffix.lower() == ".ply" or not sidecar.exists() or not inp.with_suffix(".f32").exists():
            raise RuntimeError(f"--method stereo needs a disparity raster (.f32) with its .json sidecar; "
                               f"{inp} has none (create one with `scene --stereo`)")
        dmap = DisparityMap.load(inp)
        pose = args.pose if args.pose is not None else dmap.rover_pose
        dets = detect_stereo(dmap, cfgs["stereo_detector"], pose)
    out = args.out_dir / (args.output or f"detections_{args.method}.json")
    write_detections(out, dets)
    print(f"wrote {out} ({len(dets)} detections)")
    return 0


# ---------------------------------------------------------------- traverse

def cmd_traverse(args, cfgs) -> int:
    from dataclasses import replace

    from .landmarks import LandmarkDb, db_from_scene
    from .localizer import load_route, run_traverse, traverse_world
    from .terrain import SceneTruth

    tcfg = cfgs["traverse"]
    overrides = {k: v for k, v in (("drift_fraction", args.drift), ("update_every_m", args.update_every),
                                   ("detector", args.detector)) if v is not None}
    tcfg = replace(tcfg, **overrides)
    if args.scene:
        scene = SceneTruth.load(args.scene)
        if not args.route:
            raise UsageError("--scene needs --route")
        route = load_route(args.route)
        db = LandmarkDb.load(args.db) if args.db else db_from_scene(scene, args.map_sigma, seed=args.seed)
    else:
        scene, route = traverse_world(args.length, args.density, seed=args.seed)
        if args.route:
            route = load_route(args.route)
        db = LandmarkDb.load(args.db) if args.db else db_from_scene(scene, args.map_sigma, seed=args.seed)
    cfgs_run = {k: cfgs[k] for k in ("lidar_sensor", "lidar_detector", "stereo_sensor", "stereo_detector")}
    if "lidar_sensor" not in args.config_sections:
        cfgs_run["lidar_sensor"] = replace(cfgs["lidar_sensor"], max_range=tcfg.lidar_max_range)
    log = run_traverse(scene, route, db, tcfg, seed=args.seed, cfgs=cfgs_run, loc_cfg=cfgs["localizer"])
    path = args.out_dir / (args.output or "traverse.jsonl")
    log.write_jsonl(path)
    err = np.hypot(*log.errors().T)
    sensed = [s for s in log.steps if s.sensed]
    summary = {"seed": args.seed, "steps": len(log.steps), "updates": len(sensed),
               "updates_with_matches": sum(s.n_matches > 0 for s in sensed),
               "step_failures": sum(s.error is not None for s in log.steps),
               "max_error_m": round(float(err.max()), 6), "final_error_m": round(float(err[-1]), 6),
               "max_three_sigma_m": round(float(log.three_sigma().max()), 6),
               "drift_fraction": tcfg.drift_fraction, "detector": tcfg.detector}
    _write_json(path.with_suffix(".summary.json"), summary)
    print(f"wrote {path} ({len(log.steps)} steps, max error {summary['max_error_m']:.2f} m)")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args, cfgs) -> int:
    from .evalkit import SweepGrid, emit_report, run_sweep

    if args.preset == "full-sweep":
        grid = SweepGrid.full(args.seeds)
    else:
        if not (args.diameters and args.ranges):
            raise UsageError("eval needs --preset or both --diameters and --ranges")
        grid = SweepGrid(args.diameters, args.ranges, args.approaches, args.seeds)
    cfgs_run = {k: cfgs[k] for k in ("lidar_sensor", "lidar_detector", "stereo_sensor", "stereo_detector")}

    def progress(i, n):
        if args.verbose and (i == n or i % 50 == 0):
            print(f"  {i}/{n} trials", file=sys.stderr)

    report = run_sweep(args.detector, grid, cfgs_run, seed=args.seed, workers=args.workers, progress=progress)
    paths = emit_report(report, args.out_dir)
    for p in paths:
        print(f"wrote {p}")
    for d in grid.diameters:
        s3, n = report.three_sigma(d)
        shown = f"{s3:.2f} m" if math.isfinite(s3) else "n/a"
        print(f"  D={d:g} m: 3-sigma (15-20 m) {shown} from {n} detections")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="craterloc", description="Crater landmark detection and localization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON file overriding default thresholds")
    p.add_argument("--out-dir", type=Path, default=None,
                   help=f"output directory (default ${OUT_DIR_ENV} or the current directory)")
    p.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("scene", help="synthesize a one-crater scene (plus optional scans)")
    s.add_argument("--diameter", type=float, help="crater diameter (m)")
    s.add_argument("--range", type=float, help="rover to near-rim distance (m)")
    s.add_argument("--approach", type=float, default=0.0, help="approach direction (deg)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cell-size", type=float, default=0.05)
    s.add_argument("--roughness", type=float, default=0.03, help="terrain RMS height (m)")
    s.add_argument("--map-sigma", type=float, default=0.5, help="landmark map position noise (m)")
    s.add_argument("--name", help="output file stem")
    s.add_argument("--lidar", action="store_true", help="also write a simulated LIDAR scan (PLY)")
    s.add_argument("--stereo", action="store_true", help="also write a simulated disparity map")
    s.add_argument("--preset", choices=PRESETS, help="write the sweep manifest instead of one scene")

    d = sub.add_parser("detect", help="run a crater detector on a scan")
    d.add_argument("--method", choices=("lidar", "stereo"), required=True)
    d.add_argument("--input", required=True, help="PLY cloud (lidar) or disparity raster (stereo)")
    d.add_argument("--db", help="landmark map (JSON lines)")
    d.add_argument("--pose", type=_pose, help="rover pose prior x,y,heading_rad")
    d.add_argument("--prior-sigma", type=float, default=1.0, help="1-sigma pose prior (m)")
    d.add_argument("--output", help="output file name")

    t = sub.add_parser("traverse", help="simulate a localized traverse")
    t.add_argument("--route", help="JSON list of [x, y] waypoints")
    t.add_argument("--scene", help="scene stem to drive through (default: generated world)")
    t.add_argument("--db", help="landmark map (default: derived from the scene)")
    t.add_argument("--drift", type=float, help="odometry drift fraction")
    t.add_argument("--update-every", type=float, help="sensing cadence (m)")
    t.add_argument("--detector", choices=("lidar", "stereo", "none"))
    t.add_argument("--length", type=float, default=500.0, help="generated route length (m)")
    t.add_argument("--density", type=float, default=3.5, help="generated craters per 100 m")
    t.add_argument("--map-sigma", type=float, default=0.5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--output", help="log file name")

    e = sub.add_parser("eval", help="detection probability and error sweep")
    e.add_argument("--detector", choices=("lidar", "stereo"), required=True)
    e.add_argument("--preset", choices=PRESETS)
    e.add_argument("--diameters", type=_floats)
    e.add_argument("--ranges", type=_floats)
    e.add_argument("--approaches", type=_floats, default=[0.0, 90.0, 180.0, 270.0])
    e.add_argument("--seeds", type=int, default=40, help="trials per (diameter, range) cell")
    e.add_argument("--seed", type=int, default=0, help="master seed")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("-v", "--verbose", action="store_true")
    return p


COMMANDS = {"scene": cmd_scene, "detect": cmd_detect, "traverse": cmd_traverse, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfgs = config_mod.load(args.config)
        raw = json.loads(Path(args.config).read_text()) if args.config else {}
    except config_mod.ConfigError as exc:
        print(f"craterloc: error: {exc}", file=sys.stderr)
        return 2
    args.config_sections = set(raw)
    if args.dump_config:
        print(json.dumps(config_mod.to_json(cfgs), indent=2, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("craterloc: error: a subcommand is required", file=sys.stderr)
        return 2
    out = args.out_dir or Path(os.environ.get(OUT_DIR_ENV) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"craterloc: error: cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return 1
    args.out_dir = out
    try:
        return COMMANDS[args.command](args, cfgs)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"craterloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level report, exit code 1
        print(f"craterloc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
