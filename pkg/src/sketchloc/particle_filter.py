"""Sequential importance resampling over pixel pose and map scale."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .beam_model import BeamModelParams, RangeScan, scan_log_likelihoods
from .raster_map import SketchMap
from .se2 import MotionNoiseParams, OdomIncrement, Pose2D, propagate_arrays, sample_scale, wrap_angle


class DegenerateWeightsError(RuntimeError):
    """Every particle received a negligible likelihood."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class ParticleSet:
    """Particles as parallel arrays: pixel pose, scale (m/px) and log weight."""

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    scale: np.ndarray
    log_weight: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        n = len(self.x)
        if n == 0:
            raise ValueError("particle set must be non-empty")
        for name in ("y", "theta", "scale", "log_weight"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"particle array {name!r} has wrong length")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weight - logsumexp(self.log_weight))

    def take(self, idx: np.ndarray) -> "ParticleSet":
        n = len(idx)
        return ParticleSet(self.x[idx].copy(), self.y[idx].copy(), self.theta[idx].copy(),
                           self.scale[idx].copy(), np.full(n, -math.log(n)), True)

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.x.copy(), self.y.copy(), self.theta.copy(), self.scale.copy(),
                           self.log_weight.copy(), self.normalized)

    def state_matrix(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.theta, self.scale])


@dataclass(frozen=True)
class InitRegion:
    """Axis-aligned pixel rectangle plus heading and scale intervals."""

    x0: float
    y0: float
    x1: float
    y1: float
    theta_range: tuple[float, float] = (-math.pi, math.pi)
    scale_range: tuple[float, float] = (0.01, 1.0)

    def __post_init__(self) -> None:
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate init rectangle ({self.x0}, {self.y0}, {self.x1}, {self.y1})")
        if self.theta_range[1] < self.theta_range[0]:
            raise ValueError("theta_range must be ordered")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")

    @classmethod
    def centered(cls, cx: float, cy: float, size: float, **kw) -> "InitRegion":
        h = size / 2.0
        return cls(cx - h, cy - h, cx + h, cy + h, **kw)

    def clipped(self, m: SketchMap) -> "InitRegion":
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, float(m.width)), min(self.y1, float(m.height))
        return InitRegion(x0, y0, x1, y1, self.theta_range, self.scale_range)


@dataclass(frozen=True)
class KldConfig:
    bin_size: tuple[float, float, float, float] = (10.0, 10.0, 0.35, 0.05)
    epsilon: float = 0.05
    z_quantile: float = 2.326
    n_min: int = 300
    n_max: int = 5000

    def __post_init__(self) -> None:
        if min(self.bin_size) <= 0 or self.epsilon <= 0 or self.z_quantile <= 0:
            raise ValueError("KLD bin sizes, epsilon and z_quantile must be positive")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")


def initialize(region: InitRegion, n: int, rng: np.random.Generator) -> ParticleSet:
    if n < 1:
        raise ValueError("need at least one particle")
    x = rng.uniform(region.x0, region.x1, n)
    y = rng.uniform(region.y0, region.y1, n)
    t0, t1 = region.theta_range
    theta = wrap_angle(rng.uniform(t0, t1, n)) if t1 > t0 else np.full(n, wrap_angle(float(t0)))
    s0, s1 = region.scale_range
    scale = rng.uniform(s0, s1, n) if s1 > s0 else np.full(n, float(s0))
    return ParticleSet(x, y, theta, scale, np.full(n, -math.log(n)), True)


def predict(ps: ParticleSet, u: OdomIncrement, mp: MotionNoiseParams,
            rng: np.random.Generator) -> ParticleSet:
    """Advance scales by their random walk and poses by the scaled odometry.

    Poses are projected with each particle's scale from before this step.
    """
    new_scale = sample_scale(ps.scale, mp.sigma_s, mp.s_min, mp.s_max, rng)
    x, y, theta = propagate_arrays(ps.x, ps.y, ps.theta, ps.scale, u, mp, rng)
    return ParticleSet(x, y, theta, new_scale, ps.log_weight.copy(), ps.normalized)


def normalize_log_weights(log_weight: np.ndarray) -> np.ndarray:
    return log_weight - logsumexp(log_weight)


def update_weights(ps: ParticleSet, scan: RangeScan, m: SketchMap, bp: BeamModelParams) -> ParticleSet:
    ll = scan_log_likelihoods(scan, ps.x, ps.y, ps.theta, ps.scale, m, bp)
    if not np.isfinite(ll).any() or ll.max() <= bp.out_of_map_floor:
        outside = int(np.count_nonzero((ps.x < 0) | (ps.x >= m.width) | (ps.y < 0) | (ps.y >= m.height)))
        raise DegenerateWeightsError(
            "all particle likelihoods underflowed",
            {"n_particles": len(ps), "outside_map": outside, "max_log_likelihood": float(np.max(ll))})
    lw = normalize_log_weights(ps.log_weight + ll)
    return ParticleSet(ps.x, ps.y, ps.theta, ps.scale, lw, True)


def effective_sample_size(ps: ParticleSet) -> float:
    w = ps.weights
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(weights)
    cum /= cum[-1]
    cum[-1] = 1.0
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(cum, positions, side="right")


def resample_low_variance(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Low-variance (systematic) resampling; output weights are uniform."""
    return ps.take(systematic_indices(ps.weights, len(ps), rng))


def kld_required_n(k: int, cfg: KldConfig) -> int:
    """Particles needed so the KL error stays below ``epsilon`` with ``k`` occupied bins."""
    if k <= 1:
        return cfg.n_min
    a = 2.0 / (9.0 * (k - 1))
    n = (k - 1) / (2.0 * cfg.epsilon) * (1.0 - a + math.sqrt(a) * cfg.z_quantile) ** 3
    return int(min(max(math.ceil(n), cfg.n_min), cfg.n_max))


def _kld_required_n_array(k: np.ndarray, cfg: KldConfig) -> np.ndarray:
    km1 = np.maximum(k - 1, 1).astype(np.float64)
    a = 2.0 / (9.0 * km1)
    n = np.ceil(km1 / (2.0 * cfg.epsilon) * (1.0 - a + np.sqrt(a) * cfg.z_quantile) ** 3)
    n = np.where(k <= 1, cfg.n_min, n)
    return np.clip(n, cfg.n_min, cfg.n_max).astype(np.int64)


def bin_keys(ps: ParticleSet, bin_size) -> np.ndarray:
    bx, by, bt, bs = bin_size
    return np.column_stack([
        np.floor(ps.x / bx), np.floor(ps.y / by),
        np.floor((ps.theta + math.pi) / bt), np.floor(ps.scale / bs),
    ]).astype(np.int64)


def kld_resample(ps: ParticleSet, cfg: KldConfig, rng: np.random.Generator) -> ParticleSet:
    """Draw particles one at a time until the KLD bound for the occupied bins is met.

    Draws are i.i.d. weight-proportional; the stopping point is evaluated
    after every draw, so the result matches a sequential loop exactly.
    """
    cum = np.cumsum(ps.weights)
    cum /= cum[-1]
    cum[-1] = 1.0
    draws = np.searchsorted(cum, rng.uniform(size=cfg.n_max), side="right")
    keys = bin_keys(ps, cfg.bin_size)[draws]
    _, first = np.unique(keys, axis=0, return_index=True)
    is_new = np.zeros(cfg.n_max, dtype=np.int64)
    is_new[first] = 1
    k = np.cumsum(is_new)
    n_drawn = np.arange(1, cfg.n_max + 1)
    done = (n_drawn >= _kld_required_n_array(k, cfg)) & (n_drawn >= cfg.n_min)
    stop = int(np.argmax(done)) + 1 if done.any() else cfg.n_max
    return ps.take(draws[:stop])


@dataclass
class Estimate:
    pose: Pose2D
    scale: float
    covariance: np.ndarray = field(repr=False)
    theta_std: float = 0.0
    best_pose: Pose2D | None = None
    best_scale: float | None = None


def estimate(ps: ParticleSet) -> Estimate:
    """Weighted mean of x, y and scale, circular mean of heading.

    ``covariance`` is the weighted 3x3 covariance of ``(x, y, scale)``;
    ``theta_std`` is the circular standard deviation.  The highest-weight
    particle is reported alongside.
    """
    w = ps.weights
    mx = float(np.dot(w, ps.x))
    my = float(np.dot(w, ps.y))
    ms = float(np.dot(w, ps.scale))
    c = float(np.dot(w, np.cos(ps.theta)))
    s = float(np.dot(w, np.sin(ps.theta)))
    mt = math.atan2(s, c)
    r = min(math.hypot(c, s), 1.0)
    theta_std = math.sqrt(-2.0 * math.log(r)) if r > 0 else math.inf
    d = np.column_stack([ps.x - mx, ps.y - my, ps.scale - ms])
    cov = (d * w[:, None]).T @ d
    b = int(np.argmax(ps.log_weight))
    return Estimate(Pose2D(mx, my, mt), ms, cov, theta_std,
                    Pose2D(float(ps.x[b]), float(ps.y[b]), float(ps.theta[b])), float(ps.scale[b]))
