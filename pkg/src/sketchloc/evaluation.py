"""Room-level success scoring, success tables and the ratio-difference analysis."""
from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .raster_map import MapMetadata, SketchMap, map_aspect_ratio
from .se2 import Pose2D

Rect = tuple[float, float, float, float]


def _id_key(rid: str):
    return (0, int(rid), "") if str(rid).isdigit() else (1, 0, str(rid))


@dataclass(frozen=True)
class RoomRegions:
    """Room id -> inclusive pixel rectangle ``(x0, y0, x1, y1)``."""

    rooms: dict[str, Rect]

    def __post_init__(self) -> None:
        clean = {}
        for rid, (x0, y0, x1, y1) in self.rooms.items():
            if x1 < x0 or y1 < y0:
                raise ValueError(f"room {rid!r} has an inverted rectangle")
            clean[str(rid)] = (float(x0), float(y0), float(x1), float(y1))
        object.__setattr__(self, "rooms", clean)

    @classmethod
    def from_metadata(cls, meta: MapMetadata) -> "RoomRegions":
        return cls(dict(meta.rooms))

    def validate_for(self, m: SketchMap) -> None:
        for rid, (x0, y0, x1, y1) in self.rooms.items():
            if x0 < 0 or y0 < 0 or x1 > m.width or y1 > m.height:
                raise ValueError(f"room {rid!r} lies outside the {m.width}x{m.height} sketch")

    def ids(self) -> list[str]:
        return sorted(self.rooms, key=_id_key)


def locate_room(pose: Pose2D, regions: RoomRegions) -> str | None:
    """Lowest id whose rectangle contains the pose position (numeric ids sort numerically)."""
    for rid in regions.ids():
        x0, y0, x1, y1 = regions.rooms[rid]
        if x0 <= pose.x <= x1 and y0 <= pose.y <= y1:
            return rid
    return None


@dataclass
class RunResult:
    route: str
    sketch: str
    seed: int
    target_room: str
    final_pose: Pose2D
    final_scale: float
    located_room: str | None = None
    success: bool = False
    trace: list = field(default_factory=list, repr=False)

    @classmethod
    def score(cls, route: str, sketch: str, seed: int, target_room: str, final_pose: Pose2D,
              final_scale: float, regions: RoomRegions, trace=None) -> "RunResult":
        room = locate_room(final_pose, regions)
        rect = regions.rooms[target_room]
        inside = rect[0] <= final_pose.x <= rect[2] and rect[1] <= final_pose.y <= rect[3]
        return cls(route, sketch, seed, target_room, final_pose, final_scale, room, inside, trace or [])

    def to_dict(self) -> dict:
        return {
            "route": self.route, "sketch": self.sketch, "seed": self.seed,
            "target_room": self.target_room, "located_room": self.located_room,
            "success": self.success, "final_x": self.final_pose.x, "final_y": self.final_pose.y,
            "final_theta": self.final_pose.theta, "final_scale": self.final_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(str(d["route"]), str(d["sketch"]), int(d["seed"]), str(d["target_room"]),
                   Pose2D(float(d["final_x"]), float(d["final_y"]), float(d["final_theta"])),
                   float(d["final_scale"]), d.get("located_room"), bool(d["success"]))


@dataclass
class SuccessTable:
    """Per (route, sketch) success percentages plus per-sketch totals."""

    routes: list[str]
    sketches: list[str]
    cells: dict[tuple[str, str], tuple[int, int]]

    def percent(self, route: str, sketch: str) -> float | None:
        c = self.cells.get((route, sketch))
        return None if c is None else 100.0 * c[0] / c[1]

    def total(self, sketch: str) -> float:
        """Run-weighted mean success over the routes of one sketch."""
        ok = sum(c[0] for (r, s), c in self.cells.items() if s == sketch)
        n = sum(c[1] for (r, s), c in self.cells.items() if s == sketch)
        return 100.0 * ok / n if n else 0.0

    def overall(self) -> float:
        ok = sum(c[0] for c in self.cells.values())
        n = sum(c[1] for c in self.cells.values())
        return 100.0 * ok / n if n else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["route"] + self.sketches)
        for r in self.routes:
            row = [r]
            for s in self.sketches:
                p = self.percent(r, s)
                row.append("" if p is None else _fmt(p))
            w.writerow(row)
        w.writerow(["total"] + [_fmt(self.total(s)) for s in self.sketches])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "routes": self.routes, "sketches": self.sketches,
            "cells": [{"route": r, "sketch": s, "successes": c[0], "runs": c[1],
                       "percent": 100.0 * c[0] / c[1]} for (r, s), c in self.cells.items()],
            "totals": {s: self.total(s) for s in self.sketches},
            "overall": self.overall(),
        }


def _fmt(p: float) -> str:
    return f"{p:.1f}".rstrip("0").rstrip(".")


def success_table(results: list[RunResult]) -> SuccessTable:
    """Group runs by (route, sketch); routes and sketches keep first-seen order."""
    routes: OrderedDict[str, None] = OrderedDict()
    sketches: OrderedDict[str, None] = OrderedDict()
    cells: dict[tuple[str, str], list[int]] = {}
    for r in results:
        routes.setdefault(r.route)
        sketches.setdefault(r.sketch)
        c = cells.setdefault((r.route, r.sketch), [0, 0])
        c[0] += int(r.success)
        c[1] += 1
    return SuccessTable(list(routes), list(sketches), {k: (v[0], v[1]) for k, v in cells.items()})


@dataclass
class RatioSeries:
    names: list[str]
    ratio_difference: list[float]
    success: list[float]
    spearman: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sketch", "ratio_difference", "success_percent"])
        for n, d, s in zip(self.names, self.ratio_difference, self.success):
            w.writerow([n, repr(d), repr(s)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"points": [{"sketch": n, "ratio_difference": d, "success_percent": s}
                           for n, d, s in zip(self.names, self.ratio_difference, self.success)],
                "spearman": self.spearman}


def ratio_difference(sketch: SketchMap, reference: SketchMap) -> float:
    return abs(map_aspect_ratio(sketch) - map_aspect_ratio(reference))


def ratio_vs_success(entries, names: list[str] | None = None) -> RatioSeries:
    """``entries``: ``(sketch, reference, success_percent)`` triples; output sorted by ratio difference."""
    entries = list(entries)
    if len(entries) < 2:
        raise ValueError("need at least two sketches")
    names = names or [f"sketch-{i}" for i in range(len(entries))]
    rows = [(ratio_difference(sk, ref), float(succ), name) for (sk, ref, succ), name in zip(entries, names)]
    rows.sort(key=lambda r: (r[0], r[2]))
    diffs = [r[0] for r in rows]
    succ = [r[1] for r in rows]
    if np.ptp(diffs) == 0 or np.ptp(succ) == 0:
        rho = float("nan")
    else:
        rho = float(spearmanr(diffs, succ).statistic)
    return RatioSeries([r[2] for r in rows], diffs, succ, rho)


def results_to_json(results: list[RunResult], **extra) -> str:
    d = {"runs": [r.to_dict() for r in results]}
    d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
