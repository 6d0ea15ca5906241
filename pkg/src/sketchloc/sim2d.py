"""Deterministic 2D world simulator producing odometry, laser scans and ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .beam_model import RangeScan
from .raster_map import SketchMap, raycast_many
from .se2 import MotionNoiseParams, Pose2D, sample_noise, se2_compose, wrap_angle
from .sensor_log import ScanRecord, SensorLog, beam_angles

CAPTURE_RADIUS = 0.2


class InfeasibleTrajectoryError(ValueError):
    """A waypoint lies in an obstacle or a straight segment is blocked."""


@dataclass(frozen=True)
class WorldMap:
    """Metric occupancy grid; ``occupied[iy, ix]`` with y up, origin = metric corner of cell (0, 0)."""

    occupied: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.ndim != 2 or occ.size == 0:
            raise ValueError("world grid must be a non-empty 2D array")
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "_grid", SketchMap.from_occupancy(occ))

    @property
    def grid(self) -> SketchMap:
        return self._grid  # type: ignore[attr-defined]

    @property
    def size(self) -> tuple[float, float]:
        h, w = self.occupied.shape
        return w * self.resolution, h * self.resolution

    def to_cell(self, x, y):
        return (np.asarray(x) - self.origin[0]) / self.resolution, (np.asarray(y) - self.origin[1]) / self.resolution

    def is_free(self, x: float, y: float) -> bool:
        cx, cy = self.to_cell(x, y)
        ix, iy = int(math.floor(cx)), int(math.floor(cy))
        h, w = self.occupied.shape
        return 0 <= ix < w and 0 <= iy < h and not self.occupied[iy, ix]

    def raycast(self, x, y, angles, max_range: float) -> np.ndarray:
        """Metric ranges from ``(x, y)`` along ``angles``, capped at ``max_range``."""
        cx, cy = self.to_cell(x, y)
        return raycast_many(self.grid, cx, cy, angles, max_range / self.resolution) * self.resolution


@dataclass(frozen=True)
class SensorSpec:
    beams: int = 180
    fov: float = math.pi
    z_max: float = 20.0
    scan_period: int = 1


@dataclass(frozen=True)
class TrajectorySpec:
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 0.1
    turn_rate: float = 0.3
    sensor: SensorSpec = SensorSpec()
    dt: float = 0.1
    max_steps: int = 100_000

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise ValueError("trajectory needs at least two waypoints")
        if not (self.speed > 0 and self.turn_rate > 0):
            raise ValueError("speed and turn_rate must be positive")


def check_trajectory(world: WorldMap, traj: TrajectorySpec) -> None:
    for i, (x, y) in enumerate(traj.waypoints):
        if not world.is_free(x, y):
            raise InfeasibleTrajectoryError(f"waypoint {i} ({x}, {y}) is not in free space")
    for i, (a, b) in enumerate(zip(traj.waypoints, traj.waypoints[1:])):
        d = math.hypot(b[0] - a[0], b[1] - a[1])
        if d == 0:
            continue
        ang = math.atan2(b[1] - a[1], b[0] - a[0])
        hit = float(world.raycast(a[0], a[1], ang, d)[()])
        if hit < d - 1e-9:
            raise InfeasibleTrajectoryError(
                f"segment {i}->{i + 1} from {a} to {b} blocked after {hit:.3f} m")


def drive(traj: TrajectorySpec) -> list[Pose2D]:
    """Ground-truth unicycle poses following the waypoints.

    The robot turns toward the current waypoint at up to ``turn_rate`` per
    step and only translates once roughly facing it; a waypoint counts as
    reached inside the capture radius (the last one must be reached exactly).
    """
    wps = traj.waypoints
    x, y = wps[0]
    theta = math.atan2(wps[1][1] - y, wps[1][0] - x)
    poses = [Pose2D(x, y, theta)]
    target = 1
    for _ in range(traj.max_steps):
        tx, ty = wps[target]
        dist = math.hypot(tx - x, ty - y)
        last = target == len(wps) - 1
        if (last and dist < 1e-9) or (not last and dist < CAPTURE_RADIUS):
            if last:
                break
            target += 1
            continue
        err = wrap_angle(math.atan2(ty - y, tx - x) - theta)
        dtheta = max(-traj.turn_rate, min(traj.turn_rate, err))
        theta = wrap_angle(theta + dtheta)
        v = min(traj.speed, dist) if abs(err - dtheta) < math.pi / 8 else 0.0
        x += v * math.cos(theta)
        y += v * math.sin(theta)
        poses.append(Pose2D(x, y, theta))
    else:
        raise InfeasibleTrajectoryError("trajectory did not terminate within max_steps")
    return poses


def simulate_run(world: WorldMap, traj: TrajectorySpec, odom_noise: MotionNoiseParams,
                 range_noise_sigma: float, rng: np.random.Generator) -> SensorLog:
    """Drive ``traj`` through ``world`` and record noisy odometry and scans."""
    check_trajectory(world, traj)
    truth = drive(traj)
    sensor = traj.sensor
    angles = beam_angles(sensor.beams, sensor.fov)
    log = SensorLog(fov=sensor.fov, z_max=sensor.z_max)
    odom = truth[0]
    for step, pose in enumerate(truth):
        if step > 0:
            prev = truth[step - 1]
            delta = se2_compose(prev.inverse(), pose)
            qx, qy, qt = sample_noise(odom_noise, rng)
            noisy = se2_compose(delta, Pose2D(qx, qy, qt))
            odom = se2_compose(odom, noisy)
        ts = step * traj.dt
        log.odometry.append(odom)
        log.truth.append(pose)
        log.timestamps.append(ts)
        if step % sensor.scan_period == 0:
            ranges = world.raycast(pose.x, pose.y, pose.theta + angles, sensor.z_max)
            if range_noise_sigma > 0:
                ranges = ranges + rng.standard_normal(ranges.shape) * range_noise_sigma
            ranges = np.clip(ranges, 0.0, sensor.z_max)
            log.scans.append(ScanRecord(step, ts, RangeScan(ranges, angles, ts), odom, pose))
    return log
