"""Four-component beam likelihood, evaluated in the pixel frame of a sketch."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .raster_map import SketchMap, raycast_many
from .se2 import Pose2D

DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)

# weights as learned in the original experiments; they sum to 1.205 and are
# normalized on construction
PAPER_WEIGHTS = (0.005, 0.5, 0.3, 0.4)


@dataclass(frozen=True)
class BeamModelParams:
    """Beam mixture parameters in meters.

    Weights are normalized on construction; ``raw_weights`` keeps the values
    that were passed in.  With ``scale_jacobian`` the pixel-frame density is
    divided by the scale so that it is a density over metric ranges.
    """

    sigma_z: float = 0.1
    lam: float = 0.1
    delta: float = 0.01
    z_max: float = 20.0
    w_hit: float = PAPER_WEIGHTS[0]
    w_dyn: float = PAPER_WEIGHTS[1]
    w_max: float = PAPER_WEIGHTS[2]
    w_rnd: float = PAPER_WEIGHTS[3]
    beams_per_scan: int = 10
    scale_jacobian: bool = False
    out_of_map_log_likelihood: float | None = None
    raw_weights: tuple[float, float, float, float] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        w = (self.w_hit, self.w_dyn, self.w_max, self.w_rnd)
        if min(w) < 0:
            raise ValueError(f"mixture weights must be non-negative, got {w}")
        total = math.fsum(w)
        if total <= 0:
            raise ValueError("mixture weights must not all be zero")
        if not self.raw_weights:
            object.__setattr__(self, "raw_weights", tuple(float(v) for v in w))
        for name, v in zip(("w_hit", "w_dyn", "w_max", "w_rnd"), w):
            object.__setattr__(self, name, float(v) / total)
        if not self.sigma_z > 0 or not self.lam > 0:
            raise ValueError("sigma_z and lam must be positive")
        if not 0 < self.delta < self.z_max:
            raise ValueError(f"need 0 < delta < z_max, got delta={self.delta}, z_max={self.z_max}")
        if self.beams_per_scan < 1:
            raise ValueError("beams_per_scan must be >= 1")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_hit, self.w_dyn, self.w_max, self.w_rnd])

    def with_weights(self, weights) -> "BeamModelParams":
        w = [float(v) for v in weights]
        return replace(self, w_hit=w[0], w_dyn=w[1], w_max=w[2], w_rnd=w[3], raw_weights=())

    def in_pixels(self, s: float) -> "BeamModelParams":
        """Same model with lengths expressed in pixels at scale ``s`` m/px."""
        return replace(self, sigma_z=self.sigma_z / s, lam=self.lam * s, delta=self.delta / s,
                       z_max=self.z_max / s, raw_weights=self.raw_weights)

    @property
    def out_of_map_floor(self) -> float:
        if self.out_of_map_log_likelihood is not None:
            return self.out_of_map_log_likelihood
        return self.beams_per_scan * LOG_DENSITY_FLOOR


@dataclass(frozen=True)
class RangeScan:
    """One laser scan; ranges in meters, angles in radians in the sensor frame."""

    ranges: np.ndarray
    angles: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        r = np.asarray(self.ranges, dtype=np.float64)
        a = np.asarray(self.angles, dtype=np.float64)
        if r.shape != a.shape or r.ndim != 1:
            raise ValueError("ranges and angles must be 1D and equal length")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("ranges must be finite and non-negative")
        object.__setattr__(self, "ranges", r)
        object.__setattr__(self, "angles", a)

    def __len__(self) -> int:
        return self.ranges.shape[0]

    def scaled(self, c: float) -> "RangeScan":
        return RangeScan(self.ranges * c, self.angles, self.timestamp)


def component_densities(z, z_hat, sigma_z, lam, delta, z_max):
    """Per-component densities ``(hit, dyn, max, rnd)`` with broadcasting.

    Arguments are in any consistent length unit.  The hit Gaussian is
    renormalized over the mixture support ``[0, z_max + delta]``; the
    truncated exponential is zero when ``z_hat`` is 0.
    """
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    upper = z_max + delta
    inside = (z >= 0.0) & (z <= upper)
    mass = ndtr((upper - z_hat) / sigma_z) - ndtr(-z_hat / sigma_z)
    u = (z - z_hat) / sigma_z
    f_hit = np.where(inside, np.exp(-0.5 * u * u) / (sigma_z * math.sqrt(2.0 * math.pi))
                     / np.maximum(mass, DENSITY_FLOOR), 0.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        norm = -np.expm1(-lam * z_hat)
        f_dyn = np.where((z_hat > 0.0) & (z >= 0.0) & (z <= z_hat),
                         lam * np.exp(-lam * z) / norm, 0.0)
    f_max = np.where((z >= 0.0) & (z <= z_max), 1.0 / z_max, 0.0)
    f_rnd = np.where(np.abs(z - z_max) <= delta, 1.0 / (2.0 * delta), 0.0)
    return f_hit, f_dyn, f_max, f_rnd


def beam_density(z, z_hat, p: BeamModelParams):
    """Mixture density of range ``z`` given expected range ``z_hat``."""
    f_hit, f_dyn, f_max, f_rnd = component_densities(z, z_hat, p.sigma_z, p.lam, p.delta, p.z_max)
    out = p.w_hit * f_hit + p.w_dyn * f_dyn + p.w_max * f_max + p.w_rnd * f_rnd
    if np.ndim(out) == 0:
        return float(out)
    return out


def subsample_indices(n_beams: int, k: int) -> np.ndarray:
    """Evenly spaced beam indices, deterministic in ``(n_beams, k)``."""
    if k >= n_beams:
        return np.arange(n_beams)
    return (np.arange(k) * n_beams) // k


def scan_log_likelihoods(scan: RangeScan, x, y, theta, s, m: SketchMap,
                         p: BeamModelParams) -> np.ndarray:
    """Log-likelihood of ``scan`` for each particle ``(x, y, theta, s)``.

    Measured ranges are divided by each particle's scale and compared with
    pixel ray casts; model lengths are converted to pixels the same way.
    Particles outside the map get ``p.out_of_map_floor``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), x.shape)
    idx = subsample_indices(len(scan), p.beams_per_scan)
    z = scan.ranges[idx]
    alpha = scan.angles[idx]

    z_max_px = (p.z_max / s)[:, None]
    z_hat = raycast_many(m, x[:, None], y[:, None], theta[:, None] + alpha[None, :], z_max_px)
    sc = s[:, None]
    dens = beam_density_scaled(z[None, :] / sc, z_hat, sc, p)
    logd = np.log(np.maximum(dens, DENSITY_FLOOR))
    if p.scale_jacobian:
        logd = logd - np.log(sc)
    ll = logd.sum(axis=1)
    inside = (x >= 0) & (x < m.width) & (y >= 0) & (y < m.height)
    return np.where(inside, ll, p.out_of_map_floor)


def beam_density_scaled(z_px, z_hat_px, s, p: BeamModelParams):
    """Mixture density in pixel units at scale ``s`` (broadcasts over ``s``)."""
    f_hit, f_dyn, f_max, f_rnd = component_densities(
        z_px, z_hat_px, p.sigma_z / s, p.lam * s, p.delta / s, p.z_max / s)
    return p.w_hit * f_hit + p.w_dyn * f_dyn + p.w_max * f_max + p.w_rnd * f_rnd


def scan_log_likelihood(scan: RangeScan, pose: Pose2D, s: float, m: SketchMap,
                        p: BeamModelParams) -> float:
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return float(scan_log_likelihoods(scan, pose.x, pose.y, pose.theta, s, m, p)[0])


def expected_ranges(pose: Pose2D, s: float, angles, m: SketchMap, z_max: float) -> np.ndarray:
    """Noise-free scan in meters as seen from a pixel pose at scale ``s``."""
    angles = np.asarray(angles, dtype=np.float64)
    px = raycast_many(m, pose.x, pose.y, pose.theta + angles, z_max / s)
    return px * s
