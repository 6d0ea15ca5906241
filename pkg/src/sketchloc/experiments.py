"""Batch protocol: simulate routes, localize on the sketch, score at room level.

Also provides the beam-parameter calibration used for all experiments: the
robot is placed at a few fixed spots, full scans are matched against ray
casts on sketches of the same place, the best scale per spot is found by
grid search and the mixture is fitted by EM.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .beam_model import BeamModelParams
from .evaluation import RoomRegions, RunResult
from .learning import CalibrationResult, CalibrationRow, CalibrationSample, calibrate, rows_to_samples
from .localizer import FilterConfig, LocalizationResult, localize
from .particle_filter import InitRegion, KldConfig
from .scenarios import Route, Scenario, apartment_scenario, room_scenario
from .se2 import MotionNoiseParams, Pose2D
from .sensor_log import SensorLog, beam_angles
from .sim2d import SensorSpec, TrajectorySpec, simulate_run

# hit-dominant starting point for the scale grid search and EM
CALIBRATION_INIT = BeamModelParams(sigma_z=0.3, lam=0.1, w_hit=0.7, w_dyn=0.2, w_max=0.1, w_rnd=0.001,
                                   scale_jacobian=True)
CALIBRATION_GRID = tuple(round(0.02 + 0.001 * i, 6) for i in range(81))  # 0.02 .. 0.10 m/px


@dataclass(frozen=True)
class SimSettings:
    speed: float = 0.1
    turn_rate: float = 0.3
    scan_period: int = 3
    beams: int = 180
    fov: float = math.pi
    z_max: float = 20.0
    odom_noise: MotionNoiseParams = MotionNoiseParams.isotropic(0.0004, 0.01, 0.0)
    range_noise: float = 0.02

    def trajectory(self, route: Route) -> TrajectorySpec:
        sensor = SensorSpec(self.beams, self.fov, self.z_max, self.scan_period)
        return TrajectorySpec(route.waypoints, self.speed, self.turn_rate, sensor)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines one batch of runs apart from the seeds."""

    sim: SimSettings = SimSettings()
    motion: MotionNoiseParams = MotionNoiseParams(sigma_s=0.005)
    beam: BeamModelParams = BeamModelParams(sigma_z=0.3, lam=0.01, w_hit=0.6, w_dyn=0.3, w_max=0.1,
                                            w_rnd=0.0001, scale_jacobian=True)
    filter: FilterConfig = FilterConfig(n_particles=50_000, kld=KldConfig(n_min=3000, n_max=30_000))
    init_size: float = 150.0
    init_scale_range: tuple[float, float] = (0.01, 1.0)


@dataclass
class RouteRun:
    result: RunResult
    localization: LocalizationResult = field(repr=False)
    log: SensorLog = field(repr=False)


def run_route(scenario: Scenario, route: Route, seed: int, cfg: ExperimentConfig,
              sketch_name: str | None = None) -> RouteRun:
    """Simulate one route with ``seed`` and localize it on the scenario's sketch."""
    rng = np.random.default_rng(seed)
    log = simulate_run(scenario.world(), cfg.sim.trajectory(route), cfg.sim.odom_noise,
                       cfg.sim.range_noise, rng)
    start = scenario.to_sketch_pose(log.truth[0])
    region = InitRegion.centered(start.x, start.y, cfg.init_size, scale_range=cfg.init_scale_range)
    loc = localize(log, scenario.sketch(), region, cfg.motion, cfg.beam, cfg.filter, rng)
    regions = RoomRegions(scenario.sketch_rooms())
    est = loc.final
    pose = est.pose if cfg.filter.estimate_mode == "mean" else est.best_pose
    scale = est.scale if cfg.filter.estimate_mode == "mean" else est.best_scale
    res = RunResult.score(route.name, sketch_name or scenario.name, seed, route.target_room,
                          pose, scale, regions, loc.trace)
    return RouteRun(res, loc, log)


def _job(args) -> RunResult:
    scenario, route, seed, cfg, name = args
    return run_route(scenario, route, seed, cfg, name).result


def run_batch(scenario: Scenario, seeds, cfg: ExperimentConfig, routes: list[Route] | None = None,
              parallel: int = 1, sketch_name: str | None = None) -> list[RunResult]:
    """All (route, seed) pairs; results are ordered by route then seed regardless of ``parallel``."""
    jobs = [(scenario, r, int(s), cfg, sketch_name) for r in (routes or scenario.routes) for s in seeds]
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as ex:
            return list(ex.map(_job, jobs))
    return [_job(j) for j in jobs]


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

def calibration_rows(scenario: Scenario, spots, rng: np.random.Generator, beams: int = 360,
                     range_noise: float = 0.02, z_max: float = 20.0, sketch_id: str = "") -> list[CalibrationRow]:
    """Full scans taken at world spots ``(x, y, theta)``, expressed at the matching sketch poses."""
    world = scenario.world()
    angles = beam_angles(beams, 2 * math.pi * (beams - 1) / beams)
    rows = []
    for x, y, th in spots:
        z = world.raycast(x, y, th + angles, z_max)
        z = np.clip(z + rng.standard_normal(z.shape) * range_noise, 0.0, z_max)
        sp = scenario.to_sketch_pose(Pose2D(x, y, th))
        for a, r in zip(angles, z):
            rows.append(CalibrationRow(sketch_id or scenario.name, sp, float(a), float(r)))
    return rows


def default_calibration(seed: int = 0, n_sketches: int = 3) -> tuple[list[CalibrationSample], CalibrationResult]:
    """Calibrate on several independently drawn sketches of the single room."""
    base = room_scenario()
    spots = [(2.5, 3.0, 0.0), (7.5, 2.5, 1.0), (6.5, 6.0, 2.5), (2.0, 6.5, -1.5)]
    rng = np.random.default_rng(seed)
    samples: list[CalibrationSample] = []
    for k in range(n_sketches):
        sc = replace(base, sketch_seed=101 + k)
        sid = f"room-sketch-{k}"
        rows = calibration_rows(sc, spots, rng, sketch_id=sid)
        samples += rows_to_samples(rows, {sid: sc.sketch()})
    return samples, calibrate(samples, CALIBRATION_GRID, CALIBRATION_INIT)


def scenario_by_name(name: str) -> Scenario:
    if name == "room":
        return room_scenario()
    if name == "apartment":
        return apartment_scenario()
    raise ValueError(f"unknown scenario {name!r} (expected 'room' or 'apartment')")
