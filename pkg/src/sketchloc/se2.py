"""SE(2) pose algebra and the pixel-frame motion proposal with scale random walk."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angles to ``[-pi, pi)``; works on scalars and arrays."""
    if isinstance(a, np.ndarray):
        w = np.mod(a + math.pi, TWO_PI) - math.pi
        # fmod rounding can land exactly on +pi
        return np.where(w >= math.pi, w - TWO_PI, w)
    w = math.fmod(a + math.pi, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    w -= math.pi
    if w >= math.pi:
        w -= TWO_PI
    return w


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def __iter__(self):
        return iter((self.x, self.y, self.theta))

    def compose(self, other: "Pose2D") -> "Pose2D":
        return se2_compose(self, other)

    def inverse(self) -> "Pose2D":
        return se2_inverse(self)


def se2_compose(a: Pose2D, b: Pose2D) -> Pose2D:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def se2_inverse(a: Pose2D) -> Pose2D:
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(-c * a.x - s * a.y, s * a.x - c * a.y, -a.theta)


def se2_between(a: Pose2D, b: Pose2D) -> Pose2D:
    """Relative transform ``a^-1 ⊕ b``."""
    return se2_compose(se2_inverse(a), b)


def compose_arrays(x1, y1, t1, x2, y2, t2):
    """Element-wise composition of pose arrays; returns ``(x, y, theta)``."""
    c, s = np.cos(t1), np.sin(t1)
    return x1 + c * x2 - s * y2, y1 + s * x2 + c * y2, wrap_angle(np.asarray(t1 + t2, dtype=np.float64))


@dataclass(frozen=True)
class OdomIncrement:
    """Relative motion in the robot frame (meters, radians)."""

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self) -> None:
        vals = (self.dx, self.dy, self.dtheta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"odometry increment must be finite, got {vals}")
        if abs(self.dtheta) > math.pi:
            raise ValueError(f"|dtheta| must not exceed pi, got {self.dtheta}")

    @classmethod
    def between(cls, a: Pose2D, b: Pose2D) -> "OdomIncrement":
        d = se2_between(a, b)
        return cls(d.x, d.y, d.theta)

    def as_pose(self) -> Pose2D:
        return Pose2D(self.dx, self.dy, self.dtheta)


@dataclass(frozen=True)
class MotionNoiseParams:
    """Proposal noise: translational covariance (m^2), heading std (rad), scale step std (m/px)."""

    sigma_q: tuple[tuple[float, float], tuple[float, float]] = ((0.1, 0.0), (0.0, 0.1))
    sigma_theta: float = 0.05
    sigma_s: float = 0.1
    s_min: float = 0.001
    s_max: float = 10.0

    def __post_init__(self) -> None:
        q = np.asarray(self.sigma_q, dtype=np.float64)
        if q.shape != (2, 2):
            raise ValueError("sigma_q must be 2x2")
        if not np.allclose(q, q.T):
            raise ValueError("sigma_q must be symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-12:
            raise ValueError("sigma_q must be positive semi-definite")
        object.__setattr__(self, "sigma_q", tuple(tuple(float(v) for v in row) for row in q))
        if self.sigma_theta < 0 or self.sigma_s < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0 < self.s_min < self.s_max:
            raise ValueError(f"need 0 < s_min < s_max, got {self.s_min}, {self.s_max}")

    @classmethod
    def isotropic(cls, var_q: float, sigma_theta: float, sigma_s: float, **kw) -> "MotionNoiseParams":
        return cls(((var_q, 0.0), (0.0, var_q)), sigma_theta, sigma_s, **kw)

    @classmethod
    def zero(cls, **kw) -> "MotionNoiseParams":
        return cls(((0.0, 0.0), (0.0, 0.0)), 0.0, 0.0, **kw)

    def cholesky(self) -> np.ndarray:
        q = np.asarray(self.sigma_q)
        # PSD-safe factor: eigh handles singular covariances that cholesky rejects
        vals, vecs = np.linalg.eigh(q)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_noise(params: MotionNoiseParams, rng: np.random.Generator, size: int | None = None):
    """Draw odometry noise ``(qx, qy, theta)``.

    The translation is N(0, sigma_q); the heading is wrapped normal, drawn as
    a plain normal and wrapped.  With ``size=None`` returns floats, otherwise
    three arrays of length ``size``.
    """
    n = 1 if size is None else size
    z = rng.standard_normal((n, 3))
    q = z[:, :2] @ params.cholesky().T
    th = wrap_angle(z[:, 2] * params.sigma_theta)
    if size is None:
        return float(q[0, 0]), float(q[0, 1]), float(th[0])
    return q[:, 0], q[:, 1], th


def project_odometry(u: OdomIncrement, noise, scale):
    """Perturb ``u`` by ``noise`` in the metric frame, then convert translation to pixels.

    Returns ``(dx_px, dy_px, dtheta)``; the rotation is not rescaled.
    """
    qx, qy, qt = noise
    c, s = math.cos(u.dtheta), math.sin(u.dtheta)
    mx = u.dx + c * qx - s * qy
    my = u.dy + s * qx + c * qy
    return mx / scale, my / scale, u.dtheta + qt


def propagate(pose: Pose2D, s: float, u: OdomIncrement, params: MotionNoiseParams,
              rng: np.random.Generator) -> Pose2D:
    """Move a pixel-frame pose by odometry ``u`` (meters) at scale ``s`` (m/px)."""
    _check_odom(u)
    dx, dy, dt = project_odometry(u, sample_noise(params, rng), s)
    return se2_compose(pose, Pose2D(dx, dy, dt))


def propagate_arrays(x, y, theta, s, u: OdomIncrement, params: MotionNoiseParams,
                     rng: np.random.Generator):
    """Vectorised :func:`propagate` over particle arrays."""
    _check_odom(u)
    qx, qy, qt = sample_noise(params, rng, size=len(x))
    dx, dy, dt = project_odometry(u, (qx, qy, qt), s)
    return compose_arrays(x, y, theta, dx, dy, dt)


def sample_scale(s, sigma_s: float, s_min: float, s_max: float, rng: np.random.Generator):
    """One random-walk step of the scale, clamped to ``[s_min, s_max]``."""
    if isinstance(s, np.ndarray):
        eps = rng.standard_normal(s.shape) * sigma_s
        return np.clip(s + eps, s_min, s_max)
    eps = float(rng.standard_normal()) * sigma_s
    return min(max(s + eps, s_min), s_max)


def _check_odom(u: OdomIncrement) -> None:
    if not (math.isfinite(u.dx) and math.isfinite(u.dy) and math.isfinite(u.dtheta)):
        raise ValueError(f"odometry increment must be finite, got {u}")
