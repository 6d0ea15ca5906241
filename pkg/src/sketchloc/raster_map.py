"""Raster sketch maps and ray casting in pixel coordinates.

The pixel frame has its origin at the lower-left corner of the image, x to
the right and y up, so that poses and laser angles keep the usual
right-handed convention.  Cell ``(ix, iy)`` covers ``[ix, ix+1) x [iy, iy+1)``
and is stored at ``cells[iy, ix]``; row 0 of ``cells`` is the bottom row of
the source image.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from PIL import Image, UnidentifiedImageError
from PIL.PngImagePlugin import PngInfo

FREE = 0
OCCUPIED = 1
UNKNOWN = 2

DEFAULT_OCCUPIED_THRESHOLD = 127


class MapFormatError(ValueError):
    """Raised when image bytes cannot be decoded as a raster map."""


class MapValidationError(ValueError):
    """Raised for structurally invalid maps or queries."""


class OutOfMapError(ValueError):
    """Raised when a ray origin lies outside the map."""


@dataclass(frozen=True)
class SketchMap:
    """Immutable occupancy raster.

    ``cells`` holds one of FREE, OCCUPIED, UNKNOWN per pixel, shape
    ``(height, width)``.  ``unknown_blocking`` makes Unknown pixels stop
    rays, which is what replayed occupancy grids want.
    """

    cells: np.ndarray
    occupied_threshold: int = DEFAULT_OCCUPIED_THRESHOLD
    unknown_blocking: bool = False
    blocking: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.ndim != 2 or cells.shape[0] == 0 or cells.shape[1] == 0:
            raise MapValidationError(f"map must be a non-empty 2D raster, got shape {cells.shape}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        mask = cells == OCCUPIED
        if self.unknown_blocking:
            mask |= cells == UNKNOWN
        blocking = np.ascontiguousarray(mask.astype(np.uint8))
        blocking.setflags(write=False)
        object.__setattr__(self, "blocking", blocking)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x < self.width and 0.0 <= y < self.height

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.cells == OCCUPIED))

    def with_unknown_blocking(self, flag: bool) -> "SketchMap":
        return SketchMap(self.cells, self.occupied_threshold, flag)

    @classmethod
    def from_occupancy(cls, occupied: np.ndarray, **kwargs) -> "SketchMap":
        """Build a map from a boolean array indexed ``[iy, ix]`` (y up)."""
        cells = np.where(np.asarray(occupied, dtype=bool), OCCUPIED, FREE).astype(np.uint8)
        return cls(cells, **kwargs)


def classify(gray: np.ndarray, occupied_threshold: int = DEFAULT_OCCUPIED_THRESHOLD,
             unknown_levels: tuple[int, int] | None = None) -> np.ndarray:
    """Map grayscale levels to cell classes.

    A pixel is Occupied iff ``gray <= occupied_threshold`` and it is not in the
    inclusive ``unknown_levels`` band; pixels in the band are Unknown.
    """
    gray = np.asarray(gray)
    cells = np.full(gray.shape, FREE, dtype=np.uint8)
    cells[gray <= occupied_threshold] = OCCUPIED
    if unknown_levels is not None:
        lo, hi = unknown_levels
        cells[(gray >= lo) & (gray <= hi)] = UNKNOWN
    return cells


def decode_gray(image_bytes: bytes) -> np.ndarray:
    """Decode PGM/PNG bytes into a uint8 array in image row order (top row first)."""
    try:
        img = Image.open(io.BytesIO(image_bytes))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MapFormatError(f"cannot decode map image: {exc}") from exc
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        peak = arr.max() if arr.size else 0
        arr = np.round(arr * (255.0 / peak)) if peak > 255 else arr
        return arr.astype(np.uint8)
    if img.mode in ("RGBA", "LA", "P", "PA"):
        img = img.convert("RGBA")
        background = Image.new("RGBA", img.size, (255, 255, 255, 255))
        img = Image.alpha_composite(background, img)
    if img.mode != "L":
        # ITU-R 601-2 luma
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def load_map(image_bytes: bytes, occupied_threshold: int = DEFAULT_OCCUPIED_THRESHOLD,
             unknown_levels: tuple[int, int] | None = None,
             unknown_blocking: bool = False) -> SketchMap:
    gray = decode_gray(image_bytes)
    if gray.ndim != 2 or gray.shape[0] == 0 or gray.shape[1] == 0:
        raise MapValidationError(f"zero-dimension map image: shape {gray.shape}")
    if not 0 <= occupied_threshold <= 255:
        raise MapValidationError(f"occupied_threshold must be in [0, 255], got {occupied_threshold}")
    cells = classify(np.flipud(gray), occupied_threshold, unknown_levels)
    return SketchMap(cells, occupied_threshold, unknown_blocking)


def load_map_file(path: str | Path, occupied_threshold: int = DEFAULT_OCCUPIED_THRESHOLD,
                  unknown_levels: tuple[int, int] | None = None,
                  unknown_blocking: bool = False) -> SketchMap:
    return load_map(Path(path).read_bytes(), occupied_threshold, unknown_levels, unknown_blocking)


def map_to_image(m: SketchMap) -> np.ndarray:
    """Render a map back to grayscale (Occupied 0, Unknown 205, Free 255), top row first."""
    gray = np.full(m.cells.shape, 255, dtype=np.uint8)
    gray[m.cells == OCCUPIED] = 0
    gray[m.cells == UNKNOWN] = 205
    return np.flipud(gray).copy()


def encode_pgm(gray: np.ndarray) -> bytes:
    """Binary P5 encoding of an 8-bit image given top row first."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def encode_png(gray: np.ndarray, text: dict[str, str] | None = None) -> bytes:
    """Grayscale PNG; ``text`` entries are stored as tEXt chunks."""
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8), mode="L").save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


# --------------------------------------------------------------------------
# ray casting
# --------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _cast_one(blocking, ox, oy, angle, max_range):
    h, w = blocking.shape
    ix = int(math.floor(ox))
    iy = int(math.floor(oy))
    if ix < 0 or iy < 0 or ix >= w or iy >= h:
        return max_range
    if blocking[iy, ix]:
        return 0.0
    dx = math.cos(angle)
    dy = math.sin(angle)
    if dx > 0.0:
        step_x = 1
        t_max_x = (ix + 1.0 - ox) / dx
        t_delta_x = 1.0 / dx
    elif dx < 0.0:
        step_x = -1
        t_max_x = (ox - ix) / -dx
        t_delta_x = -1.0 / dx
    else:
        step_x = 0
        t_max_x = math.inf
        t_delta_x = math.inf
    if dy > 0.0:
        step_y = 1
        t_max_y = (iy + 1.0 - oy) / dy
        t_delta_y = 1.0 / dy
    elif dy < 0.0:
        step_y = -1
        t_max_y = (oy - iy) / -dy
        t_delta_y = -1.0 / dy
    else:
        step_y = 0
        t_max_y = math.inf
        t_delta_y = math.inf
    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            ix += step_x
            t_max_x += t_delta_x
        else:
            t = t_max_y
            iy += step_y
            t_max_y += t_delta_y
        if t >= max_range:
            return max_range
        if ix < 0 or iy < 0 or ix >= w or iy >= h:
            return max_range
        if blocking[iy, ix]:
            return t


@numba.njit(cache=True, nogil=True)
def _cast_many(blocking, ox, oy, angles, max_ranges, out):
    for i in range(ox.shape[0]):
        out[i] = _cast_one(blocking, ox[i], oy[i], angles[i], max_ranges[i])


def raycast(m: SketchMap, origin: tuple[float, float], angle: float, max_range: float) -> float:
    """Distance in pixels from ``origin`` to the first blocking cell along ``angle``.

    Returns ``max_range`` when nothing is hit before the range limit or the
    map border.  An origin inside a blocking cell returns 0.
    """
    ox, oy = float(origin[0]), float(origin[1])
    if not m.contains(ox, oy):
        raise OutOfMapError(f"ray origin ({ox}, {oy}) outside {m.width}x{m.height} map")
    if not max_range > 0:
        raise MapValidationError(f"max_range must be positive, got {max_range}")
    return float(_cast_one(m.blocking, ox, oy, float(angle), float(max_range)))


def raycast_many(m: SketchMap, ox, oy, angles, max_ranges) -> np.ndarray:
    """Vectorised :func:`raycast`; out-of-map origins yield their max range.

    All arguments broadcast against each other.
    """
    ox, oy, angles, max_ranges = np.broadcast_arrays(
        np.asarray(ox, dtype=np.float64), np.asarray(oy, dtype=np.float64),
        np.asarray(angles, dtype=np.float64), np.asarray(max_ranges, dtype=np.float64))
    shape = ox.shape
    out = np.empty(ox.size, dtype=np.float64)
    # copies: broadcast views are read-only, which numba warns about
    _cast_many(m.blocking, ox.flatten(), oy.flatten(), angles.flatten(), max_ranges.flatten(), out)
    return out.reshape(shape)


def occupied_bbox(m: SketchMap) -> tuple[int, int, int, int]:
    """Inclusive pixel bounds ``(x0, y0, x1, y1)`` of Occupied cells."""
    ys, xs = np.nonzero(m.cells == OCCUPIED)
    if xs.size == 0:
        raise MapValidationError("map has no Occupied cells")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def map_aspect_ratio(m: SketchMap) -> float:
    """Longer over shorter side of the Occupied bounding box (always >= 1).

    Side lengths count pixels inclusively, so a box spanning columns 0..199
    is 200 wide.
    """
    x0, y0, x1, y1 = occupied_bbox(m)
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    return max(w, h) / min(w, h)


# --------------------------------------------------------------------------
# metadata sidecar
# --------------------------------------------------------------------------

@dataclass
class MapMetadata:
    """Parsed ``key = value`` sidecar next to a map image."""

    occupied_threshold: int = DEFAULT_OCCUPIED_THRESHOLD
    unknown_levels: tuple[int, int] | None = None
    unknown_blocking: bool = False
    rooms: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)
    extra: dict[str, str] = field(default_factory=dict)


def parse_metadata(text: str) -> MapMetadata:
    meta = MapMetadata()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MapValidationError(f"metadata line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "occupied_threshold":
            meta.occupied_threshold = int(value)
        elif key == "unknown_levels":
            lo, hi = (int(v) for v in value.split(","))
            meta.unknown_levels = (lo, hi)
        elif key == "unknown_blocking":
            meta.unknown_blocking = value.lower() in ("1", "true", "yes", "on")
        elif key.startswith("room."):
            coords = tuple(float(v) for v in value.split(","))
            if len(coords) != 4:
                raise MapValidationError(f"metadata line {lineno}: room needs x0,y0,x1,y1")
            meta.rooms[key[len("room."):]] = coords  # type: ignore[assignment]
        else:
            meta.extra[key] = value
    return meta


def format_metadata(meta: MapMetadata) -> str:
    lines = [f"occupied_threshold = {meta.occupied_threshold}"]
    if meta.unknown_levels is not None:
        lines.append(f"unknown_levels = {meta.unknown_levels[0]},{meta.unknown_levels[1]}")
    if meta.unknown_blocking:
        lines.append("unknown_blocking = true")
    for key in sorted(meta.extra):
        lines.append(f"{key} = {meta.extra[key]}")
    for rid in sorted(meta.rooms, key=_room_sort_key):
        x0, y0, x1, y1 = meta.rooms[rid]
        lines.append(f"room.{rid} = " + ",".join(repr(float(v)) for v in (x0, y0, x1, y1)))
    return "\n".join(lines) + "\n"


def _room_sort_key(rid: str):
    return (0, int(rid), "") if rid.isdigit() else (1, 0, rid)


def load_map_with_metadata(image_path: str | Path, metadata_path: str | Path | None = None):
    """Load an image and its sidecar; returns ``(SketchMap, MapMetadata)``."""
    meta = MapMetadata()
    if metadata_path is not None:
        meta = parse_metadata(Path(metadata_path).read_text())
    m = load_map_file(image_path, meta.occupied_threshold, meta.unknown_levels, meta.unknown_blocking)
    return m, meta
