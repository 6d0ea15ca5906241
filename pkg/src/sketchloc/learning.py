"""Beam-model calibration: per-sketch scale grid search and EM fitting of the mixture."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ndtr

from .beam_model import DENSITY_FLOOR, BeamModelParams, beam_density_scaled, component_densities
from .raster_map import SketchMap, raycast_many
from .se2 import Pose2D

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4
WEIGHT_FLOOR = 1e-6
LAMBDA_FLOOR = 1e-4
CSV_FIELDS = ("sketch_id", "pose_x", "pose_y", "pose_theta", "beam_angle", "z")


@dataclass(frozen=True)
class CalibrationSample:
    """A measured range ``z`` (m) and the sketch ray cast ``z_hat`` (px) for the same beam."""

    z: float
    z_hat: float
    pose: Pose2D = Pose2D(0.0, 0.0, 0.0)
    sketch_id: str = ""
    beam_angle: float = 0.0

    def __post_init__(self) -> None:
        if self.z < 0 or self.z_hat < 0:
            raise ValueError("ranges must be non-negative")


def _arrays(samples):
    z = np.array([s.z for s in samples], dtype=np.float64)
    zh = np.array([s.z_hat for s in samples], dtype=np.float64)
    return z, zh


def scale_log_likelihood(z, z_hat_px, s: float, p0: BeamModelParams) -> float:
    """Summed log density of metric ranges ``z`` against pixel casts at scale ``s``."""
    zh = np.minimum(z_hat_px, p0.z_max / s)
    dens = beam_density_scaled(np.asarray(z) / s, zh, s, p0)
    ll = float(np.sum(np.log(np.maximum(dens, DENSITY_FLOOR))))
    if p0.scale_jacobian:
        ll -= len(z) * math.log(s)
    return ll


def best_scale_grid(samples, grid, p0: BeamModelParams) -> float:
    """Grid value maximizing the scan likelihood; ties go to the smallest scale."""
    samples = list(samples)
    grid = sorted(float(g) for g in grid)
    if not samples or not grid:
        raise ValueError("best_scale_grid needs non-empty samples and grid")
    z, zh = _arrays(samples)
    scores = np.array([scale_log_likelihood(z, zh, s, p0) for s in grid])
    best = scores.max()
    # scores equal up to rounding count as ties
    tied = scores >= best - 1e-12 * max(1.0, abs(best))
    return grid[int(np.argmax(tied))]


# --------------------------------------------------------------------------
# EM
# --------------------------------------------------------------------------

@dataclass
class FitReport:
    params: BeamModelParams
    log_likelihoods: list[float]
    iterations: int
    converged: bool
    floored_components: list[str] = field(default_factory=list)
    n_samples: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        p = self.params
        return {
            "params": {
                "sigma_z": p.sigma_z, "lam": p.lam, "delta": p.delta, "z_max": p.z_max,
                "w_hit": float(p.w_hit), "w_dyn": float(p.w_dyn), "w_max": float(p.w_max), "w_rnd": float(p.w_rnd),
            },
            "weights_sum": float(p.w_hit + p.w_dyn + p.w_max + p.w_rnd),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_log_likelihood": self.log_likelihoods[-1],
            "log_likelihoods": self.log_likelihoods,
            "floored_components": self.floored_components,
            "n_samples": self.n_samples,
            "warnings": self.warnings,
        }

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


_NAMES = ("hit", "dyn", "max", "rnd")


def _constrained_weights(resp_sums: np.ndarray, floor: float) -> tuple[np.ndarray, list[int]]:
    """Maximize sum_k R_k log w_k subject to w_k >= floor and sum w = 1."""
    fixed: set[int] = set()
    while True:
        free = [k for k in range(len(resp_sums)) if k not in fixed]
        mass = 1.0 - floor * len(fixed)
        total = resp_sums[free].sum()
        w = np.full(len(resp_sums), floor)
        if total > 0:
            w[free] = mass * resp_sums[free] / total
        else:
            w[free] = mass / len(free)
        newly = [k for k in free if w[k] < floor]
        if not newly:
            return w, sorted(fixed)
        fixed.update(newly)


def _hit_q(sigma: float, r, z, zh, upper) -> float:
    """Responsibility-weighted log density of the truncated Gaussian."""
    mass = ndtr((upper - zh) / sigma) - ndtr(-zh / sigma)
    u = (z - zh) / sigma
    logf = -0.5 * u * u - math.log(sigma) - 0.5 * math.log(2 * math.pi) - np.log(np.maximum(mass, DENSITY_FLOOR))
    return float(np.dot(r, logf))


def _dyn_q(lam: float, r, z, zh) -> float:
    m = (r > 0) & (zh > 0)
    return float(np.dot(r[m], math.log(lam) - lam * z[m] - np.log(-np.expm1(-lam * zh[m]))))


def _fit_lambda(r, z, zh, lam0: float) -> float:
    """Newton iterations for the truncated-exponential rate; keeps the better of old/new."""
    m = (r > 0) & (zh > 0)
    if not m.any():
        return lam0
    r, z, zh = r[m], z[m], zh[m]
    R = r.sum()
    lam = lam0
    for _ in range(100):
        e = np.exp(-lam * zh)
        g = R / lam - np.dot(r, z) - np.dot(r, zh * e / -np.expm1(-lam * zh))
        gp = -R / lam ** 2 + np.dot(r, zh ** 2 * e / np.expm1(-lam * zh) ** 2)
        step = g / gp if gp < 0 else -g * lam  # fall back to a gradient step
        new = lam - step
        if not new > LAMBDA_FLOOR:
            new = max(lam / 2.0, LAMBDA_FLOOR)
        if abs(new - lam) < 1e-12 * max(lam, 1.0):
            lam = new
            break
        lam = new
    lam = max(lam, LAMBDA_FLOOR)
    return lam if _dyn_q(lam, r, z, zh) >= _dyn_q(lam0, r, z, zh) else lam0


def mixture_log_likelihood(z, zh, p: BeamModelParams) -> float:
    f = component_densities(z, zh, p.sigma_z, p.lam, p.delta, p.z_max)
    dens = sum(w * fk for w, fk in zip(p.weights, f))
    return float(np.sum(np.log(np.maximum(dens, DENSITY_FLOOR))))


def fit_beam_params(samples, init: BeamModelParams, max_iter: int = 200, tol: float = 1e-6,
                    fit_sigma: bool = True) -> FitReport:
    """Maximum-likelihood mixture fit by EM.

    ``samples`` are ``(z, z_hat)`` pairs in meters, or CalibrationSample
    objects whose ``z_hat`` is already in meters.  ``delta`` and ``z_max``
    stay fixed; with ``fit_sigma=False`` so does ``sigma_z``.
    """
    if samples and isinstance(samples[0], CalibrationSample):
        z, zh = _arrays(samples)
    else:
        arr = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
        z, zh = arr[:, 0], arr[:, 1]
    n = len(z)
    report_warnings = []
    if n < 100:
        msg = f"only {n} calibration samples; at least 100 recommended"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        report_warnings.append(msg)
    zh = np.minimum(zh, init.z_max)
    upper = init.z_max + init.delta
    p = init
    lls = [mixture_log_likelihood(z, zh, p)]
    floored: set[int] = set()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = np.vstack(component_densities(z, zh, p.sigma_z, p.lam, p.delta, p.z_max))
        wf = p.weights[:, None] * f
        tot = wf.sum(axis=0)
        resp = wf / np.maximum(tot, DENSITY_FLOOR)
        resp[:, tot <= 0] = 0.0

        w, fixed = _constrained_weights(resp.sum(axis=1), WEIGHT_FLOOR)
        floored.update(fixed)

        sigma = p.sigma_z
        r_hit = resp[0]
        if fit_sigma and r_hit.sum() > 0:
            closed = math.sqrt(max(np.dot(r_hit, (z - zh) ** 2) / r_hit.sum(), 0.0))
            closed = max(closed, SIGMA_FLOOR)
            cands = [sigma, closed]
            lo, hi = max(SIGMA_FLOOR, closed / 4), max(closed * 4, 10 * SIGMA_FLOOR)
            opt = minimize_scalar(lambda s: -_hit_q(s, r_hit, z, zh, upper), bounds=(lo, hi),
                                  method="bounded", options={"xatol": 1e-10})
            cands.append(float(opt.x))
            sigma = max(cands, key=lambda s: _hit_q(s, r_hit, z, zh, upper))
        lam = _fit_lambda(resp[1], z, zh, p.lam)

        p = replace(p, sigma_z=sigma, lam=lam, w_hit=w[0], w_dyn=w[1], w_max=w[2], w_rnd=w[3],
                    raw_weights=())
        ll = mixture_log_likelihood(z, zh, p)
        if ll < lls[-1] - 1e-9 * max(1.0, abs(lls[-1])):
            raise AssertionError(f"EM log-likelihood decreased at iteration {it}: {lls[-1]} -> {ll}")
        gain = ll - lls[-1]
        lls.append(ll)
        if gain < tol:
            converged = True
            break
    names = [_NAMES[k] for k in sorted(floored)]
    if names:
        log.info("EM floored starving components: %s", names)
    return FitReport(p, lls, it, converged, names, n, report_warnings)


# --------------------------------------------------------------------------
# sampling from the model (round-trip tests, synthetic calibration data)
# --------------------------------------------------------------------------

def sample_ranges(z_hat, p: BeamModelParams, rng: np.random.Generator) -> np.ndarray:
    """Draw one range per expected range from the mixture (meters)."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    n = z_hat.size
    comp = rng.choice(4, size=n, p=p.weights)
    out = np.empty(n)
    upper = p.z_max + p.delta
    # hit: truncated normal via rejection
    idx = np.flatnonzero(comp == 0)
    todo = idx
    while todo.size:
        draw = z_hat[todo] + p.sigma_z * rng.standard_normal(todo.size)
        ok = (draw >= 0) & (draw <= upper)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    # dyn: inverse cdf of exponential truncated to [0, z_hat]
    idx = np.flatnonzero(comp == 1)
    u = rng.uniform(size=idx.size)
    zh = z_hat[idx]
    dyn = -np.log1p(u * np.expm1(-p.lam * zh)) / p.lam
    out[idx] = np.where(zh > 0, dyn, 0.0)
    idx = np.flatnonzero(comp == 2)
    out[idx] = rng.uniform(0.0, p.z_max, idx.size)
    idx = np.flatnonzero(comp == 3)
    out[idx] = rng.uniform(p.z_max - p.delta, p.z_max + p.delta, idx.size)
    return out


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

@dataclass
class CalibrationRow:
    sketch_id: str
    pose: Pose2D
    beam_angle: float
    z: float


def read_calibration_csv(source) -> list[CalibrationRow]:
    """Rows of ``sketch_id,pose_x,pose_y,pose_theta,beam_angle,z`` (pose in sketch pixels)."""
    text = Path(source).read_text() if not isinstance(source, io.StringIO) else source.getvalue()
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"calibration CSV missing columns: {sorted(missing)}")
    rows = []
    for r in reader:
        rows.append(CalibrationRow(r["sketch_id"], Pose2D(float(r["pose_x"]), float(r["pose_y"]),
                                                          float(r["pose_theta"])),
                                   float(r["beam_angle"]), float(r["z"])))
    return rows


def write_calibration_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.sketch_id, repr(r.pose.x), repr(r.pose.y), repr(r.pose.theta),
                    repr(r.beam_angle), repr(r.z)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def rows_to_samples(rows, sketches: dict[str, SketchMap]) -> list[CalibrationSample]:
    """Ray cast every row on its sketch; ``z_hat`` in pixels, uncapped up to the map diagonal."""
    out = []
    for sid in sorted({r.sketch_id for r in rows}):
        m = sketches[sid]
        group = [r for r in rows if r.sketch_id == sid]
        reach = math.hypot(m.width, m.height)
        zh = raycast_many(m, [r.pose.x for r in group], [r.pose.y for r in group],
                          [r.pose.theta + r.beam_angle for r in group], reach)
        out += [CalibrationSample(r.z, float(h), r.pose, sid, r.beam_angle) for r, h in zip(group, zh)]
    return out


@dataclass
class CalibrationResult:
    scales: dict[tuple[str, tuple[float, float, float]], float]
    report: FitReport


def calibrate(samples: list[CalibrationSample], grid, init: BeamModelParams,
              fit_sigma: bool = True) -> CalibrationResult:
    """Grid-search the scale per (sketch, pose) group, then EM-fit on metric pairs."""
    groups: dict = {}
    for smp in samples:
        key = (smp.sketch_id, (smp.pose.x, smp.pose.y, smp.pose.theta))
        groups.setdefault(key, []).append(smp)
    scales = {}
    pairs = []
    for key in sorted(groups):
        grp = groups[key]
        s = best_scale_grid(grp, grid, init)
        scales[key] = s
        pairs += [(g.z, min(g.z_hat * s, init.z_max)) for g in grp]
    return CalibrationResult(scales, fit_beam_params(pairs, init, fit_sigma=fit_sigma))


def fit_report_dict(result: CalibrationResult) -> dict:
    d = result.report.to_dict()
    d["scales"] = [{"sketch_id": k[0], "pose": list(k[1]), "scale": v}
                   for k, v in sorted(result.scales.items())]
    return d
