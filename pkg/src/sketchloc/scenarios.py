"""Synthetic worlds and hand-drawn-looking sketches of them.

A world is a list of wall segments and solid boxes in meters.  The world
grid rasterizes them metrically; a sketch warps the same geometry through a
smooth, anisotropic distortion into pixels, adds pen jitter and draws box
outlines only.  Room rectangles are carried over to the sketch so runs can
be scored at room level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .raster_map import SketchMap
from .se2 import Pose2D
from .sim2d import WorldMap

Segment = tuple[float, float, float, float]
Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class WorldGeometry:
    width: float
    height: float
    walls: tuple[Segment, ...]
    boxes: tuple[Rect, ...] = ()
    wall_thickness: float = 0.1


@dataclass(frozen=True)
class Distortion:
    """Smooth map from meters to sketch pixels.

    ``stretch`` scales each axis around the nominal ``px_per_m``; ``bend``
    adds a quadratic term per axis so the local scale varies across the map
    by roughly ``±bend``; ``shear`` tilts vertical lines.
    """

    px_per_m: float = 20.0
    stretch: tuple[float, float] = (1.1, 0.9)
    bend: tuple[float, float] = (0.1, -0.1)
    shear: float = 0.03
    margin: float = 10.0
    jitter_px: float = 0.7
    pen_px: float = 2.0

    def apply(self, x, y, width: float, height: float):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        u, v = x / width, y / height
        sx = self.px_per_m * self.stretch[0] * width
        sy = self.px_per_m * self.stretch[1] * height
        px = self.margin + sx * (u + self.bend[0] * u * (1.0 - u)) + self.shear * sy * v
        py = self.margin + sy * (v + self.bend[1] * v * (1.0 - v))
        return px, py

    def local_scale(self, x: float, y: float, width: float, height: float) -> float:
        """Meters per pixel at ``(x, y)``, geometric mean of the two axes."""
        h = 1e-4
        p0 = np.array(self.apply(x, y, width, height))
        jx = (np.array(self.apply(x + h, y, width, height)) - p0) / h
        jy = (np.array(self.apply(x, y + h, width, height)) - p0) / h
        det = abs(jx[0] * jy[1] - jx[1] * jy[0])
        return 1.0 / math.sqrt(det)

    def heading(self, x: float, y: float, theta: float, width: float, height: float) -> float:
        h = 1e-4
        p0 = np.array(self.apply(x, y, width, height))
        p1 = np.array(self.apply(x + h * math.cos(theta), y + h * math.sin(theta), width, height))
        d = p1 - p0
        return math.atan2(d[1], d[0])


@dataclass
class Route:
    name: str
    start_room: str
    target_room: str
    waypoints: tuple[tuple[float, float], ...]


@dataclass
class Scenario:
    name: str
    geometry: WorldGeometry
    rooms: dict[str, Rect]
    routes: list[Route]
    world_resolution: float = 0.05
    distortion: Distortion = field(default_factory=Distortion)
    sketch_seed: int = 7

    def world(self) -> WorldMap:
        return rasterize_world(self.geometry, self.world_resolution)

    def sketch(self) -> SketchMap:
        return draw_sketch(self.geometry, self.distortion, np.random.default_rng(self.sketch_seed))

    def sketch_rooms(self) -> dict[str, Rect]:
        """Room rectangles mapped to sketch pixels (bounding box of the warped corners)."""
        g = self.geometry
        out = {}
        for rid, (x0, y0, x1, y1) in self.rooms.items():
            px, py = self.distortion.apply([x0, x1, x0, x1], [y0, y0, y1, y1], g.width, g.height)
            out[rid] = (float(px.min()), float(py.min()), float(px.max()), float(py.max()))
        return out

    def to_sketch_pose(self, pose: Pose2D) -> Pose2D:
        g = self.geometry
        px, py = self.distortion.apply(pose.x, pose.y, g.width, g.height)
        return Pose2D(float(px), float(py), self.distortion.heading(pose.x, pose.y, pose.theta, g.width, g.height))

    def to_sketch_point(self, x: float, y: float) -> tuple[float, float]:
        g = self.geometry
        px, py = self.distortion.apply(x, y, g.width, g.height)
        return float(px), float(py)

    def true_scale(self, x: float, y: float) -> float:
        g = self.geometry
        return self.distortion.local_scale(x, y, g.width, g.height)

    def with_distortion(self, **kw) -> "Scenario":
        return replace(self, distortion=replace(self.distortion, **kw))


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------

def _segment_distance(px, py, seg) -> np.ndarray:
    x0, y0, x1, y1 = seg
    dx, dy = x1 - x0, y1 - y0
    ll = dx * dx + dy * dy
    if ll == 0:
        return np.hypot(px - x0, py - y0)
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / ll, 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _stamp_segments(mask: np.ndarray, segments, half_width: float) -> None:
    """Mark cells whose centers lie within ``half_width`` of any segment (cell units)."""
    h, w = mask.shape
    for seg in segments:
        x0, y0, x1, y1 = seg
        lo_x = max(int(math.floor(min(x0, x1) - half_width - 1)), 0)
        hi_x = min(int(math.ceil(max(x0, x1) + half_width + 1)), w)
        lo_y = max(int(math.floor(min(y0, y1) - half_width - 1)), 0)
        hi_y = min(int(math.ceil(max(y0, y1) + half_width + 1)), h)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        cy, cx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
        d = _segment_distance(cx + 0.5, cy + 0.5, seg)
        mask[lo_y:hi_y, lo_x:hi_x] |= d <= half_width


def rasterize_world(g: WorldGeometry, resolution: float) -> WorldMap:
    w = int(math.ceil(g.width / resolution)) + 1
    h = int(math.ceil(g.height / resolution)) + 1
    occ = np.zeros((h, w), dtype=bool)
    segs = [tuple(v / resolution for v in s) for s in g.walls]
    _stamp_segments(occ, segs, max(g.wall_thickness / (2 * resolution), 0.5))
    for x0, y0, x1, y1 in g.boxes:
        i0, i1 = int(math.floor(y0 / resolution)), int(math.ceil(y1 / resolution))
        j0, j1 = int(math.floor(x0 / resolution)), int(math.ceil(x1 / resolution))
        occ[i0:i1, j0:j1] = True
    return WorldMap(occ, resolution)


def _polyline(seg: Segment, step: float) -> np.ndarray:
    x0, y0, x1, y1 = seg
    n = max(int(math.ceil(math.hypot(x1 - x0, y1 - y0) / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)
    return np.column_stack([x0 + t * (x1 - x0), y0 + t * (y1 - y0)])


def draw_sketch(g: WorldGeometry, d: Distortion, rng: np.random.Generator) -> SketchMap:
    """Warp the world outlines into pixels and draw them with a jittery pen."""
    segments = list(g.walls)
    for x0, y0, x1, y1 in g.boxes:
        segments += [(x0, y0, x1, y0), (x1, y0, x1, y1), (x1, y1, x0, y1), (x0, y1, x0, y0)]
    corners = d.apply([0, g.width, 0, g.width], [0, 0, g.height, g.height], g.width, g.height)
    w = int(math.ceil(corners[0].max() + d.margin))
    h = int(math.ceil(corners[1].max() + d.margin))
    mask = np.zeros((h, w), dtype=bool)
    strokes = []
    for seg in segments:
        pts = _polyline(seg, 0.5)
        px, py = d.apply(pts[:, 0], pts[:, 1], g.width, g.height)
        # low-frequency wobble along each stroke
        wob = np.cumsum(rng.normal(0.0, d.jitter_px, (len(px), 2)), axis=0) * 0.5
        wob -= np.linspace(wob[0], wob[-1], len(px)) * 0.5
        px = px + wob[:, 0]
        py = py + wob[:, 1]
        strokes += [(px[i], py[i], px[i + 1], py[i + 1]) for i in range(len(px) - 1)]
    _stamp_segments(mask, strokes, d.pen_px / 2.0)
    return SketchMap.from_occupancy(mask)


# --------------------------------------------------------------------------
# concrete environments
# --------------------------------------------------------------------------

def _wall_with_doors(x0, y0, x1, y1, doors) -> list[Segment]:
    """Axis-aligned wall split around door intervals given as (center, width) along the wall."""
    horizontal = y0 == y1
    a, b = (x0, x1) if horizontal else (y0, y1)
    cuts = sorted((c - wd / 2.0, c + wd / 2.0) for c, wd in doors)
    out = []
    pos = a
    for lo, hi in cuts:
        if lo > pos:
            out.append((pos, lo))
        pos = hi
    if pos < b:
        out.append((pos, b))
    if horizontal:
        return [(p, y0, q, y0) for p, q in out]
    return [(x0, p, x0, q) for p, q in out]


def room_scenario() -> Scenario:
    """Single 10 m x 8 m room with furniture; four paths from the lower-right corner."""
    W, H = 10.0, 8.0
    walls = [(0, 0, W, 0), (W, 0, W, H), (W, H, 0, H), (0, H, 0, 0),
             (3.5, H, 3.5, 6.0)]  # wall stub from the top
    boxes = [(0.0, 0.0, 1.2, 2.0),      # cupboard lower-left
             (4.5, 3.0, 6.0, 4.2),      # table
             (8.8, 6.5, 10.0, 8.0),     # shelf upper-right
             (0.0, 5.0, 0.8, 6.5)]      # cabinet left wall
    geom = WorldGeometry(W, H, tuple(walls), tuple(boxes))
    rooms = {"1": (0.0, 0.0, 5.0, 4.0), "2": (5.0, 0.0, 10.0, 4.0),
             "3": (0.0, 4.0, 5.0, 8.0), "4": (5.0, 4.0, 10.0, 8.0)}
    start = (9.0, 1.0)
    routes = [
        Route("A", "2", "3", (start, (7.5, 1.5), (3.0, 2.0), (2.0, 5.0), (2.5, 6.8))),
        Route("B", "2", "4", (start, (8.5, 3.0), (7.0, 5.5), (6.5, 7.0))),
        Route("C", "2", "1", (start, (6.5, 1.0), (3.0, 1.0), (2.0, 3.0))),
        Route("D", "2", "3", (start, (8.5, 2.5), (7.0, 5.0), (3.0, 5.0), (2.0, 5.2))),
    ]
    return Scenario("room", geom, rooms, routes)


APARTMENT_ROOMS = {
    "1": (0.0, 6.0, 5.0, 10.0),
    "2": (5.0, 6.0, 11.0, 10.0),
    "3": (11.0, 6.0, 16.0, 10.0),
    "4": (0.0, 0.0, 7.0, 4.0),
    "5": (7.0, 0.0, 16.0, 4.0),
}

# per room: interior anchor point and the x position of its door onto the corridor
_APARTMENT_DOORS = {"1": ((2.0, 8.3), 3.5), "2": ((8.5, 8.0), 7.2), "3": ((13.8, 8.2), 12.5),
                    "4": ((3.0, 2.0), 5.2), "5": ((12.0, 1.8), 9.0)}


def apartment_scenario(n_routes: int = 10, route_seed: int = 3) -> Scenario:
    """Five rooms along a 2 m corridor (16 m x 10 m), doors 1 m wide."""
    W, H = 16.0, 10.0
    walls: list[Segment] = [(0, 0, W, 0), (W, 0, W, H), (W, H, 0, H), (0, H, 0, 0)]
    walls += _wall_with_doors(0, 6.0, W, 6.0, [(_APARTMENT_DOORS[r][1], 1.0) for r in "123"])
    walls += _wall_with_doors(0, 4.0, W, 4.0, [(_APARTMENT_DOORS[r][1], 1.0) for r in "45"])
    walls += [(5.0, 6.0, 5.0, H), (11.0, 6.0, 11.0, H), (7.0, 0.0, 7.0, 4.0)]
    boxes = [
        (0.0, 9.0, 1.5, 10.0), (3.8, 6.0, 5.0, 7.0),          # room 1
        (6.0, 9.2, 9.0, 10.0), (10.2, 6.0, 11.0, 7.5),        # room 2
        (15.0, 6.0, 16.0, 8.0), (11.0, 9.3, 12.5, 10.0),      # room 3
        (0.0, 0.0, 2.0, 0.8), (5.8, 0.0, 7.0, 1.5),           # room 4
        (7.0, 3.2, 8.0, 4.0), (13.0, 0.0, 16.0, 0.7), (14.8, 2.5, 16.0, 4.0),  # room 5
        (0.0, 4.0, 0.6, 4.8),                                 # corridor end
    ]
    geom = WorldGeometry(W, H, tuple(walls), tuple(boxes))
    rng = np.random.default_rng(route_seed)
    ids = sorted(APARTMENT_ROOMS)
    pairs = [(a, b) for a in ids for b in ids if a != b]
    chosen = rng.choice(len(pairs), size=min(n_routes, len(pairs)), replace=False)
    routes = []
    for i in sorted(chosen):
        a, b = pairs[i]
        routes.append(Route(f"{a}->{b}", a, b, apartment_path(a, b)))
    return Scenario("apartment", geom, dict(APARTMENT_ROOMS), routes)


def apartment_path(a: str, b: str) -> tuple[tuple[float, float], ...]:
    (ax, ay), adx = _APARTMENT_DOORS[a]
    (bx, by), bdx = _APARTMENT_DOORS[b]
    a_in = (adx, 6.8 if ay > 5 else 3.2)
    b_in = (bdx, 6.8 if by > 5 else 3.2)
    return ((ax, ay), a_in, (adx, 5.0), (bdx, 5.0), b_in, (bx, by))


def route_length(route: Route) -> float:
    w = route.waypoints
    return sum(math.hypot(q[0] - p[0], q[1] - p[1]) for p, q in zip(w, w[1:]))
