import math

import numpy as np
import pytest

from sketchloc.raster_map import SketchMap


def march(m: SketchMap, ox: float, oy: float, angle: float, max_range: float, step: float = 0.01) -> float:
    """Fine-step reference ray caster: walk the ray and test the cell under each sample."""
    dx, dy = math.cos(angle), math.sin(angle)
    n = int(max_range / step) + 1
    t = np.arange(n) * step
    xs = ox + t * dx
    ys = oy + t * dy
    ix = np.floor(xs).astype(int)
    iy = np.floor(ys).astype(int)
    inside = (ix >= 0) & (iy >= 0) & (ix < m.width) & (iy < m.height)
    if not inside.all():
        stop = int(np.argmin(inside))
        t, ix, iy = t[:stop], ix[:stop], iy[:stop]
    hit = m.blocking[iy, ix].astype(bool)
    if hit.any():
        return float(t[int(np.argmax(hit))])
    return max_range


def random_map(rng: np.random.Generator, w: int = 64, h: int = 64, density: float = 0.08) -> SketchMap:
    occ = rng.uniform(size=(h, w)) < density
    return SketchMap.from_occupancy(occ)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def box_map():
    """40x30 map with a one-pixel border wall."""
    occ = np.zeros((30, 40), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    return SketchMap.from_occupancy(occ)
