"""Replays a sensor log through the scaled particle filter."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import particle_filter as pf
from .beam_model import BeamModelParams, RangeScan
from .raster_map import SketchMap
from .se2 import MotionNoiseParams, OdomIncrement
from .sensor_log import SensorLog

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    """Filter behaviour knobs.

    ``resample_mode`` is ``"always"`` (every update) or ``"ess"`` (only when
    the effective sample size drops below ``ess_threshold * N``).
    ``recovery`` is ``"reinit"`` or ``"raise"`` for degenerate weights.
    """

    n_particles: int = 5000
    resample_mode: str = "always"
    ess_threshold: float = 0.5
    use_kld: bool = True
    kld: pf.KldConfig = pf.KldConfig()
    recovery: str = "reinit"
    recovery_size: float = 150.0
    estimate_mode: str = "mean"

    def __post_init__(self) -> None:
        if self.resample_mode not in ("always", "ess"):
            raise ValueError(f"unknown resample_mode {self.resample_mode!r}")
        if self.recovery not in ("reinit", "raise"):
            raise ValueError(f"unknown recovery {self.recovery!r}")
        if self.estimate_mode not in ("mean", "max"):
            raise ValueError(f"unknown estimate_mode {self.estimate_mode!r}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")


@dataclass
class TraceRow:
    step: int
    x: float
    y: float
    theta: float
    scale: float
    n_particles: int
    ess: float


@dataclass
class LocalizationResult:
    trace: list[TraceRow]
    final: pf.Estimate
    degenerate_events: list[dict] = field(default_factory=list)
    particles: pf.ParticleSet | None = None

    @property
    def final_pose(self):
        return self.final.pose


class Localizer:
    """Stateful wrapper around the predict / weight / resample cycle."""

    def __init__(self, sketch: SketchMap, motion: MotionNoiseParams, beam: BeamModelParams,
                 config: FilterConfig, rng: np.random.Generator):
        self.sketch = sketch
        self.motion = motion
        self.beam = beam
        self.config = config
        self.rng = rng
        self.particles: pf.ParticleSet | None = None
        self.last_estimate: pf.Estimate | None = None
        self.degenerate_events: list[dict] = []

    def reset(self, region: pf.InitRegion) -> None:
        region = _clamp_region(region, self.motion)
        self.particles = pf.initialize(region.clipped(self.sketch), self.config.n_particles, self.rng)

    def step(self, u: OdomIncrement | None, scan: RangeScan, step_index: int = 0) -> TraceRow:
        assert self.particles is not None, "call reset() first"
        if u is not None:
            self.particles = pf.predict(self.particles, u, self.motion, self.rng)
        scan = _clip_scan(scan, self.beam.z_max)
        try:
            self.particles = pf.update_weights(self.particles, scan, self.sketch, self.beam)
        except pf.DegenerateWeightsError as exc:
            event = dict(exc.diagnostics, step=step_index)
            self.degenerate_events.append(event)
            log.warning("degenerate weights at step %d: %s", step_index, exc.diagnostics)
            if self.config.recovery == "raise":
                raise
            self._recover()
            self.particles = pf.update_weights(self.particles, scan, self.sketch, self.beam)
        est = pf.estimate(self.particles)
        self.last_estimate = est
        ess = pf.effective_sample_size(self.particles)
        n = len(self.particles)
        if self.config.resample_mode == "always" or ess < self.config.ess_threshold * n:
            if self.config.use_kld:
                self.particles = pf.kld_resample(self.particles, self.config.kld, self.rng)
            else:
                self.particles = pf.resample_low_variance(self.particles, self.rng)
        pose = est.pose if self.config.estimate_mode == "mean" else est.best_pose
        scale = est.scale if self.config.estimate_mode == "mean" else est.best_scale
        return TraceRow(step_index, pose.x, pose.y, pose.theta, scale, n, ess)

    def _recover(self) -> None:
        est = self.last_estimate
        if est is None:
            region = pf.InitRegion(0.0, 0.0, float(self.sketch.width), float(self.sketch.height))
        else:
            lo = max(est.scale / 2.0, self.motion.s_min)
            hi = min(est.scale * 2.0, self.motion.s_max)
            region = pf.InitRegion.centered(est.pose.x, est.pose.y, self.config.recovery_size,
                                            scale_range=(lo, hi))
        self.reset(region)

    def current_estimate(self) -> tuple:
        est = self.last_estimate
        if self.config.estimate_mode == "mean":
            return est.pose, est.scale
        return est.best_pose, est.best_scale


def _clip_scan(scan: RangeScan, z_max: float) -> RangeScan:
    if scan.ranges.size and scan.ranges.max() <= z_max:
        return scan
    return RangeScan(np.minimum(scan.ranges, z_max), scan.angles, scan.timestamp)


def _clamp_region(region: pf.InitRegion, motion: MotionNoiseParams) -> pf.InitRegion:
    lo, hi = region.scale_range
    lo, hi = max(lo, motion.s_min), min(hi, motion.s_max)
    if lo > hi:
        raise ValueError("init scale range lies outside the motion model's scale bounds")
    return pf.InitRegion(region.x0, region.y0, region.x1, region.y1, region.theta_range, (lo, hi))


def localize(sensor_log: SensorLog, sketch: SketchMap, region: pf.InitRegion,
             motion: MotionNoiseParams, beam: BeamModelParams, config: FilterConfig,
             rng: np.random.Generator, on_step=None) -> LocalizationResult:
    """Run the filter over every scan of ``sensor_log``; one trace row per scan.

    ``on_step(row, localizer)`` is called after each update, e.g. to render frames.
    """
    loc = Localizer(sketch, motion, beam, config, rng)
    loc.reset(region)
    trace = []
    for i, (rec, u) in enumerate(zip(sensor_log.scans, sensor_log.scan_increments())):
        row = loc.step(u if i > 0 else None, rec.scan, i)
        trace.append(row)
        if on_step is not None:
            on_step(row, loc)
    return LocalizationResult(trace, loc.last_estimate, loc.degenerate_events, loc.particles)
