"""``sketchloc`` command line: localize, simulate, learn, eval, experiment, defaults.

Exit codes: 0 success, 2 configuration error, 3 input/output error.
Every artifact records the config hash and the seed; reruns with the same
config and seed write byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .beam_model import BeamModelParams
from .config import ConfigError, RunConfig, default_config_text
from .evaluation import RoomRegions, RunResult, locate_room, ratio_vs_success, success_table
from .experiments import ExperimentConfig, SimSettings, default_calibration, run_batch, scenario_by_name
from .learning import calibrate, fit_report_dict, read_calibration_csv, rows_to_samples
from .localizer import localize
from .particle_filter import DegenerateWeightsError
from .raster_map import (
    MapFormatError, MapMetadata, MapValidationError, encode_png, format_metadata, load_map_file,
    load_map_with_metadata, map_to_image,
)
from .render import png_bytes, render_frame
from .se2 import MotionNoiseParams
from .sensor_log import LogFormatError, read_carmen, write_carmen
from .sim2d import InfeasibleTrajectoryError, simulate_run

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
TRACE_FIELDS = ("step", "x_px", "y_px", "theta", "scale", "n_particles", "ess")

log = logging.getLogger("sketchloc")


class InputError(RuntimeError):
    """Missing or unreadable input file (exit code 3)."""


def _dump_json(d: dict) -> str:
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _stamp(cfg: RunConfig, seed: int | None, command: str) -> dict:
    return {"command": command, "config_hash": cfg.config_hash(), "seed": seed, "version": __version__}


def _stamp_line(cfg: RunConfig, seed: int | None) -> str:
    return f"config_hash={cfg.config_hash()} seed={seed}"


def _png_text(cfg: RunConfig, seed: int | None) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": str(seed)}


def _seeds(cfg: RunConfig, args) -> list[int]:
    first = cfg.seed(args.seed)
    return [first + i for i in range(max(args.runs, 1))]


def _run_dirs(out: Path, seeds: list[int], runs_flag: int) -> list[Path]:
    if runs_flag <= 1:
        return [out]
    return [out / f"seed_{s}" for s in seeds]


def _read_input(fn, *a, what: str, **kw):
    try:
        return fn(*a, **kw)
    except (OSError, ValueError, MapFormatError, LogFormatError) as exc:
        raise InputError(f"cannot read {what}: {exc}") from exc


def _resolve_beam(cfg: RunConfig) -> tuple[BeamModelParams, dict | None]:
    beam = cfg.beam()
    if not cfg.bool("beam", "calibrate", False):
        return beam, None
    _, res = default_calibration(cfg.int("beam", "calibration_seed", 0))
    learned = replace(res.report.params, scale_jacobian=beam.scale_jacobian,
                      beams_per_scan=beam.beams_per_scan)
    return learned, fit_report_dict(res)


def _beam_dict(b: BeamModelParams) -> dict:
    return {"sigma_z": b.sigma_z, "lambda": b.lam, "delta": b.delta, "z_max": b.z_max,
            "w_hit": b.w_hit, "w_dyn": b.w_dyn, "w_max": b.w_max, "w_rnd": b.w_rnd,
            "beams_per_scan": b.beams_per_scan, "scale_jacobian": b.scale_jacobian}


# --------------------------------------------------------------------------
# localize
# --------------------------------------------------------------------------

def _localize_one(cfg_text: str, base_dir: str, seed: int, out: str, stride: int) -> dict:
    cfg = RunConfig.from_text(cfg_text, base_dir)
    out_dir = Path(out)
    sketch, meta = _read_input(load_map_with_metadata, cfg.path("map", "image"),
                               cfg.path("map", "metadata", required=False), what="map")
    fov = cfg.float("log", "fov_deg")
    slog = _read_input(read_carmen, cfg.path("log", "path"), what="log",
                       fov=None if fov is None else math.radians(fov), z_max=cfg.float("log", "z_max"))
    motion, filt, region = cfg.motion(), cfg.filter(), cfg.init_region()
    beam, _ = _resolve_beam(cfg)
    rng = np.random.default_rng(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    rooms = RoomRegions.from_metadata(meta)

    frames = out_dir / "frames"
    if stride > 0:
        frames.mkdir(exist_ok=True)

    def on_step(row, loc):
        if stride > 0 and row.step % stride == 0:
            pose, _ = loc.current_estimate()
            img = render_frame(sketch, loc.particles, pose, rooms=rooms.rooms)
            (frames / f"frame_{row.step:05d}.png").write_bytes(png_bytes(img, _png_text(cfg, seed)))

    status = "completed"
    events: list = []
    try:
        res = localize(slog, sketch, region, motion, beam, filt, rng, on_step=on_step)
        trace, events = res.trace, res.degenerate_events
        est = res.final
    except DegenerateWeightsError as exc:
        status = "degenerate"
        trace, est = [], None
        events = [exc.diagnostics]

    buf = io.StringIO()
    buf.write(f"# {_stamp_line(cfg, seed)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_FIELDS)
    for r in trace:
        w.writerow([r.step, repr(r.x), repr(r.y), repr(r.theta), repr(r.scale), r.n_particles, repr(r.ess)])
    (out_dir / "trajectory.csv").write_text(buf.getvalue())

    d = _stamp(cfg, seed, "localize")
    d.update(status=status, n_scans=len(slog.scans), degenerate_events=events, beam=_beam_dict(beam))
    if est is not None:
        pose = est.pose if filt.estimate_mode == "mean" else est.best_pose
        scale = est.scale if filt.estimate_mode == "mean" else est.best_scale
        d["final"] = {"x_px": pose.x, "y_px": pose.y, "theta": pose.theta, "scale": scale,
                      "covariance_xys": est.covariance.tolist(), "theta_std": est.theta_std,
                      "estimate_mode": filt.estimate_mode}
        d["located_room"] = locate_room(pose, rooms) if rooms.rooms else None
        target = cfg.get("eval", "target_room")
        if target:
            if target not in rooms.rooms:
                raise ConfigError(f"[eval] target_room {target!r} not in map metadata rooms")
            run = RunResult.score(cfg.get("eval", "route", "route"), cfg.get("eval", "sketch", "sketch"),
                                  seed, target, pose, scale, rooms)
            d["run"] = run.to_dict()
    (out_dir / "estimate.json").write_text(_dump_json(d))
    return d


def cmd_localize(args) -> int:
    cfg = RunConfig.load(args.config)
    # validate everything up front so config errors surface before any work
    cfg.motion(), cfg.filter(), cfg.init_region(), cfg.beam()
    cfg.path("map", "image"), cfg.path("log", "path")
    seeds = _seeds(cfg, args)
    out = Path(args.out)
    dirs = _run_dirs(out, seeds, args.runs)
    text = cfg.canonical_text(include_run=True)
    jobs = [(text, str(cfg.base_dir), s, str(d), args.render_stride) for s, d in zip(seeds, dirs)]
    if args.parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.parallel) as ex:
            list(ex.map(_localize_one, *zip(*jobs)))
    else:
        for j in jobs:
            _localize_one(*j)
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _sim_settings(cfg: RunConfig) -> SimSettings:
    d = SimSettings()
    try:
        noise = MotionNoiseParams.isotropic(cfg.float("simulate", "odom_var_q", d.odom_noise.sigma_q[0][0]),
                                            cfg.float("simulate", "odom_sigma_theta", d.odom_noise.sigma_theta),
                                            0.0)
        return SimSettings(
            cfg.float("simulate", "speed", d.speed), cfg.float("simulate", "turn_rate", d.turn_rate),
            cfg.int("simulate", "scan_period", d.scan_period), cfg.int("simulate", "beams", d.beams),
            math.radians(cfg.float("simulate", "fov_deg", math.degrees(d.fov))),
            cfg.float("simulate", "z_max", d.z_max), noise, cfg.float("simulate", "range_noise", d.range_noise))
    except ValueError as exc:
        raise ConfigError(f"[simulate] {exc}") from exc


def _scenario(cfg: RunConfig, section: str):
    try:
        sc = scenario_by_name(cfg.get(section, "scenario", "room"))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    sx, sy = cfg.float(section, "stretch_x"), cfg.float(section, "stretch_y")
    if sx is not None or sy is not None:
        cur = sc.distortion.stretch
        sc = sc.with_distortion(stretch=(sx if sx is not None else cur[0], sy if sy is not None else cur[1]))
    return sc


def _world_rooms(sc) -> dict:
    res = sc.world_resolution
    return {k: (x0 / res, y0 / res, x1 / res, y1 / res) for k, (x0, y0, x1, y1) in sc.rooms.items()}


def cmd_simulate(args) -> int:
    cfg = RunConfig.load(args.config)
    sc = _scenario(cfg, "simulate")
    sim = _sim_settings(cfg)
    name = cfg.get("simulate", "route", sc.routes[0].name)
    routes = {r.name: r for r in sc.routes}
    if name not in routes:
        raise ConfigError(f"[simulate] route {name!r} not in scenario {sc.name} ({', '.join(routes)})")
    route = routes[name]
    seeds = _seeds(cfg, args)
    world, sketch = sc.world(), sc.sketch()
    for seed, d in zip(seeds, _run_dirs(Path(args.out), seeds, args.runs)):
        d.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed)
        try:
            slog = simulate_run(world, sim.trajectory(route), sim.odom_noise, sim.range_noise, rng)
        except InfeasibleTrajectoryError as exc:
            raise ConfigError(str(exc)) from exc
        write_carmen(slog, d / "run.log", (_stamp_line(cfg, seed),))
        text = _png_text(cfg, seed)
        (d / "world.png").write_bytes(encode_png(map_to_image(world.grid), text))
        (d / "world.meta").write_text(format_metadata(MapMetadata(rooms=_world_rooms(sc), extra=dict(text))))
        (d / "sketch.png").write_bytes(encode_png(map_to_image(sketch), text))
        (d / "sketch.meta").write_text(format_metadata(MapMetadata(rooms=sc.sketch_rooms(), extra=dict(text))))
        t0, t1 = slog.truth[0], slog.truth[-1]
        res = sc.world_resolution
        sk0 = sc.to_sketch_pose(t0)
        info = _stamp(cfg, seed, "simulate")
        info.update(scenario=sc.name, route=route.name, start_room=route.start_room,
                    target_room=route.target_room, n_steps=len(slog.odometry), n_scans=len(slog.scans),
                    world_resolution=res,
                    start_world_px={"x": t0.x / res, "y": t0.y / res, "theta": t0.theta},
                    start_sketch_px={"x": sk0.x, "y": sk0.y, "theta": sk0.theta},
                    start_scale=sc.true_scale(t0.x, t0.y),
                    end_sketch_px=dict(zip(("x", "y", "theta"), sc.to_sketch_pose(t1))))
        (d / "simulate.json").write_text(_dump_json(info))
    return EXIT_OK


# --------------------------------------------------------------------------
# learn
# --------------------------------------------------------------------------

def cmd_learn(args) -> int:
    cfg = RunConfig.load(args.config)
    rows = _read_input(read_calibration_csv, cfg.path("learn", "calibration_csv"), what="calibration CSV")
    sk_paths = cfg.items("sketches")
    needed = sorted({r.sketch_id for r in rows})
    missing = [s for s in needed if s not in sk_paths]
    if missing:
        raise ConfigError(f"[sketches] has no image for sketch id(s): {', '.join(missing)}")
    sketches = {}
    for sid in needed:
        p = Path(sk_paths[sid])
        sketches[sid] = _read_input(load_map_file, p if p.is_absolute() else cfg.base_dir / p, what=f"sketch {sid}")
    g0, g1, gs = (cfg.float("learn", "grid_min", 0.01), cfg.float("learn", "grid_max", 0.2),
                  cfg.float("learn", "grid_step", 0.001))
    if not (0 < g0 <= g1 and gs > 0):
        raise ConfigError("[learn] need 0 < grid_min <= grid_max and grid_step > 0")
    grid = [round(g0 + i * gs, 12) for i in range(int(math.floor((g1 - g0) / gs + 1e-9)) + 1)]
    samples = rows_to_samples(rows, sketches)
    res = calibrate(samples, grid, cfg.beam(), fit_sigma=cfg.bool("learn", "fit_sigma", True))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = fit_report_dict(res)
    d.update(_stamp(cfg, cfg.seed(args.seed), "learn"))
    (out / "fit.json").write_text(_dump_json(d))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _load_results(cfg: RunConfig) -> list[RunResult]:
    patterns = cfg.require("eval", "results").split()
    files: list[str] = []
    for pat in patterns:
        p = Path(pat)
        full = str(p if p.is_absolute() else cfg.base_dir / p)
        files += sorted(glob.glob(full))
    if not files:
        raise InputError(f"no result files match {patterns}")
    out = []
    for f in files:
        try:
            d = json.loads(Path(f).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read result file {f}: {exc}") from exc
        runs = d.get("runs") or ([d["run"]] if "run" in d else [])
        if not runs:
            raise InputError(f"result file {f} has no scored run (set [eval] target_room when localizing)")
        out += [RunResult.from_dict(r) for r in runs]
    return out


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config)
    results = _load_results(cfg)
    tab = success_table(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg, cfg.seed(args.seed), "eval")
    (out / "success_table.csv").write_text(f"# {_stamp_line(cfg, stamp['seed'])}\n"
                                           + tab.to_csv())
    (out / "success_table.json").write_text(_dump_json(dict(tab.to_dict(), **stamp)))
    ref = cfg.path("eval", "reference", required=False)
    if ref is not None:
        reference = _read_input(load_map_file, ref, what="reference map")
        entries, names = [], []
        for name, p in sorted(cfg.items("sketches").items()):
            if name not in tab.sketches:
                continue
            p = Path(p)
            sk = _read_input(load_map_file, p if p.is_absolute() else cfg.base_dir / p, what=f"sketch {name}")
            entries.append((sk, reference, tab.total(name)))
            names.append(name)
        try:
            series = ratio_vs_success(entries, names)
        except ValueError as exc:
            raise ConfigError(f"ratio analysis: {exc}") from exc
        (out / "ratio_series.csv").write_text(f"# {_stamp_line(cfg, stamp['seed'])}\n" + series.to_csv())
        (out / "ratio_series.json").write_text(_dump_json(dict(series.to_dict(), **stamp)))
    return EXIT_OK


# --------------------------------------------------------------------------
# experiment (simulate + localize + score a whole scenario)
# --------------------------------------------------------------------------

def experiment_config(cfg: RunConfig) -> tuple[ExperimentConfig, dict | None]:
    base = ExperimentConfig()
    sim = _sim_settings(cfg) if cfg.parser.has_section("simulate") else base.sim
    motion = cfg.motion() if cfg.parser.has_section("motion") else base.motion
    filt = cfg.filter() if cfg.parser.has_section("filter") or cfg.parser.has_section("kld") else base.filter
    calib = None
    beam = base.beam
    if cfg.parser.has_section("beam"):
        beam, calib = _resolve_beam(cfg)
    lo = cfg.float("experiment", "scale_min", base.init_scale_range[0])
    hi = cfg.float("experiment", "scale_max", base.init_scale_range[1])
    ec = ExperimentConfig(sim, motion, beam, filt, cfg.float("experiment", "init_size", base.init_size), (lo, hi))
    return ec, calib


def cmd_experiment(args) -> int:
    cfg = RunConfig.load(args.config)
    sc = _scenario(cfg, "experiment")
    ec, calib = experiment_config(cfg)
    names = (cfg.get("experiment", "routes") or "").split()
    routes = sc.routes if not names else [r for r in sc.routes if r.name in names]
    if names and len(routes) != len(names):
        raise ConfigError(f"[experiment] unknown route(s) in {names}")
    first = cfg.seed(args.seed)
    n = args.runs if args.runs > 1 else cfg.int("experiment", "seeds", 10)
    seeds = list(range(first, first + n))
    results = run_batch(sc, seeds, ec, routes, parallel=args.parallel)
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg, first, "experiment")
    for r in results:
        d = dict(stamp, seed=r.seed, run=r.to_dict())
        (out / "runs" / f"{r.route.replace('->', '-')}_seed{r.seed}.json").write_text(_dump_json(d))
    tab = success_table(results)
    (out / "success_table.csv").write_text(f"# {_stamp_line(cfg, first)}\n" + tab.to_csv())
    summary = dict(stamp, table=tab.to_dict(), seeds=seeds, scenario=sc.name, beam=_beam_dict(ec.beam))
    if calib is not None:
        summary["calibration"] = calib
    (out / "experiment.json").write_text(_dump_json(summary))
    print(tab.to_csv(), end="")
    return EXIT_OK


def cmd_defaults(args) -> int:
    text = default_config_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "defaults.ini").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"localize": cmd_localize, "simulate": cmd_simulate, "learn": cmd_learn, "eval": cmd_eval,
            "experiment": cmd_experiment, "defaults": cmd_defaults}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchloc", description="Localization on hand-drawn sketch maps.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        needs_config = name != "defaults"
        p.add_argument("--config", required=needs_config, help="INI-style run configuration")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None if name == "defaults" else "out", help="output directory")
        p.add_argument("--runs", type=int, default=1, help="number of consecutive seeds")
        p.add_argument("--parallel", type=int, default=1, help="worker processes for --runs")
        p.add_argument("--render-stride", type=int, default=0, help="write an overlay frame every N scans")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.runs < 1 or args.parallel < 1 or args.render_stride < 0:
        print("error: --runs and --parallel must be >= 1, --render-stride >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, MapValidationError, InfeasibleTrajectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
