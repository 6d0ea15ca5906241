"""Overlay frames: the sketch with particles and the current estimate drawn on top."""
from __future__ import annotations

import io
import math

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .particle_filter import ParticleSet
from .raster_map import SketchMap, map_to_image
from .se2 import Pose2D

MAX_DRAWN = 3000


def render_frame(m: SketchMap, ps: ParticleSet | None, pose: Pose2D | None,
                 truth: Pose2D | None = None, rooms: dict | None = None) -> Image.Image:
    """RGB image in image coordinates (pixel-frame y flipped)."""
    img = Image.fromarray(map_to_image(m), mode="L").convert("RGB")
    d = ImageDraw.Draw(img)
    h = m.height

    def to_img(x, y):
        return x, h - 1 - y

    for x0, y0, x1, y1 in (rooms or {}).values():
        a, b = to_img(x0, y1), to_img(x1, y0)
        d.rectangle([a, b], outline=(120, 160, 255))
    if ps is not None:
        idx = np.arange(len(ps))
        if len(ps) > MAX_DRAWN:
            idx = (np.arange(MAX_DRAWN) * len(ps)) // MAX_DRAWN
        for x, y in zip(ps.x[idx], ps.y[idx]):
            ix, iy = to_img(x, y)
            d.point((ix, iy), fill=(230, 140, 0))
    for p, color in ((truth, (0, 170, 0)), (pose, (220, 0, 0))):
        if p is None:
            continue
        cx, cy = to_img(p.x, p.y)
        d.ellipse([cx - 4, cy - 4, cx + 4, cy + 4], outline=color, width=2)
        d.line([cx, cy, cx + 12 * math.cos(p.theta), cy - 12 * math.sin(p.theta)], fill=color, width=2)
    return img


def png_bytes(img: Image.Image, text: dict[str, str] | None = None) -> bytes:
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()
