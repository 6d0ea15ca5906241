"""SensorLog container and CARMEN-style text reader/writer.

Supported records: ``ODOM``, ``FLASER``, ``ROBOTLASER1``, ``TRUEPOS`` and
``PARAM``; anything else is skipped.  ODOM and laser poses are absolute
odometry poses; increments are derived from consecutive laser records.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .beam_model import RangeScan
from .se2 import OdomIncrement, Pose2D

HOSTNAME = "sketchloc"


class LogFormatError(ValueError):
    pass


@dataclass
class ScanRecord:
    step: int
    timestamp: float
    scan: RangeScan
    odom: Pose2D
    truth: Pose2D | None = None


@dataclass
class SensorLog:
    """Odometry, scans and optional ground truth of one run.

    ``odometry`` and ``truth`` hold one absolute pose per simulation step
    (``truth`` may be empty for real data).  Scan records point into the
    step sequence.
    """

    odometry: list[Pose2D] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)
    truth: list[Pose2D] = field(default_factory=list)
    scans: list[ScanRecord] = field(default_factory=list)
    fov: float = math.pi
    z_max: float = 20.0

    def odometry_increments(self) -> list[OdomIncrement]:
        """Per-step increments between consecutive ODOM poses."""
        return [OdomIncrement.between(a, b) for a, b in zip(self.odometry, self.odometry[1:])]

    def scan_increments(self) -> list[OdomIncrement]:
        """Odometry increment preceding each scan (zero for the first)."""
        out = []
        prev = None
        for rec in self.scans:
            out.append(OdomIncrement(0.0, 0.0, 0.0) if prev is None else OdomIncrement.between(prev, rec.odom))
            prev = rec.odom
        return out


def beam_angles(n: int, fov: float) -> np.ndarray:
    """``n`` angles evenly spread over ``fov`` centered on the heading, endpoints included."""
    if n == 1:
        return np.zeros(1)
    return -fov / 2.0 + np.arange(n) * (fov / (n - 1))


def _f(v: float) -> str:
    return repr(float(v))


def write_carmen(log: SensorLog, path: str | Path | None = None, comments: tuple[str, ...] = ()) -> str:
    lines = [
        "# sketchloc CARMEN-style log",
        *(f"# {c}" for c in comments),
        f"PARAM laser_front_laser_fov {_f(math.degrees(log.fov))} {HOSTNAME} 0",
        f"PARAM laser_front_laser_maxrange {_f(log.z_max)} {HOSTNAME} 0",
    ]
    scans_at = {rec.step: rec for rec in log.scans}
    for step, odo in enumerate(log.odometry):
        ts = log.timestamps[step]
        lines.append(f"ODOM {_f(odo.x)} {_f(odo.y)} {_f(odo.theta)} 0 0 0 {_f(ts)} {HOSTNAME} {_f(ts)}")
        if log.truth:
            t = log.truth[step]
            lines.append(f"TRUEPOS {_f(t.x)} {_f(t.y)} {_f(t.theta)} {_f(odo.x)} {_f(odo.y)} "
                         f"{_f(odo.theta)} {_f(ts)} {HOSTNAME} {_f(ts)}")
        rec = scans_at.get(step)
        if rec is not None:
            ranges = " ".join(_f(r) for r in rec.scan.ranges)
            o = rec.odom
            lines.append(f"FLASER {len(rec.scan)} {ranges} {_f(o.x)} {_f(o.y)} {_f(o.theta)} "
                         f"{_f(o.x)} {_f(o.y)} {_f(o.theta)} {_f(rec.timestamp)} {HOSTNAME} {_f(rec.timestamp)}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_carmen(source: str | Path, fov: float | None = None, z_max: float | None = None) -> SensorLog:
    """Parse a CARMEN-style log from a path or from log text.

    ``fov``/``z_max`` override the PARAM values (defaults: pi, 20 m) used for
    FLASER records, which carry no angle information.
    """
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        text = Path(source).read_text()
    else:
        text = str(source)
    params: dict[str, str] = {}
    log = SensorLog()
    pending: list[tuple[str, list[str], int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "PARAM" and len(tok) >= 3:
            params[tok[1]] = tok[2]
        elif tok[0] in ("ODOM", "TRUEPOS", "FLASER", "ROBOTLASER1"):
            pending.append((tok[0], tok[1:], lineno))
    if fov is None:
        fov = math.radians(float(params.get("laser_front_laser_fov", 180.0)))
    if z_max is None:
        z_max = float(params.get("laser_front_laser_maxrange", 20.0))
    log.fov, log.z_max = fov, z_max

    last_truth: Pose2D | None = None
    truths: list[Pose2D] = []
    for kind, args, lineno in pending:
        try:
            if kind == "ODOM":
                x, y, th = (float(v) for v in args[:3])
                log.odometry.append(Pose2D(x, y, th))
                log.timestamps.append(float(args[6]))
            elif kind == "TRUEPOS":
                x, y, th = (float(v) for v in args[:3])
                last_truth = Pose2D(x, y, th)
                truths.append(last_truth)
            elif kind == "FLASER":
                n = int(args[0])
                ranges = np.array([float(v) for v in args[1:1 + n]])
                rest = args[1 + n:]
                odom = Pose2D(float(rest[3]), float(rest[4]), float(rest[5]))
                ts = float(rest[6])
                scan = RangeScan(ranges, beam_angles(n, fov), ts)
                log.scans.append(ScanRecord(max(len(log.odometry) - 1, 0), ts, scan, odom, last_truth))
            else:  # ROBOTLASER1
                start, field_of_view = float(args[1]), float(args[2])
                n = int(args[7])
                ranges = np.array([float(v) for v in args[8:8 + n]])
                rest = args[8 + n:]
                n_rem = int(rest[0])
                rest = rest[1 + n_rem:]
                odom = Pose2D(float(rest[3]), float(rest[4]), float(rest[5]))
                ts = float(rest[11])
                step = field_of_view / (n - 1) if n > 1 else 0.0
                scan = RangeScan(ranges, start + step * np.arange(n), ts)
                log.scans.append(ScanRecord(max(len(log.odometry) - 1, 0), ts, scan, odom, last_truth))
        except (IndexError, ValueError) as exc:
            raise LogFormatError(f"line {lineno}: malformed {kind} record: {exc}") from exc
    if not log.scans:
        raise LogFormatError("log contains no laser records")
    if truths and len(truths) == len(log.odometry):
        log.truth = truths
    return log
