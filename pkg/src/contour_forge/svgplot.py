"""SVG rendering of scenes with ground truth and per-stage contour overlays.

The raster goes in as a base64 PNG underlay; vector layers are drawn in
scene coordinates inside a scaled group, so every polygon point in the SVG
text is exactly the predicted coordinate (diffable against detection JSON).
"""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

GT_STYLE = 'fill="none" stroke="#3b82f6" stroke-width="0.6" stroke-dasharray="2,1.2"'
STAGE_STYLES = [
    'fill="none" stroke="#f97316" stroke-width="0.5"',   # initial contour
    'fill="none" stroke="#a3e635" stroke-width="0.5"',   # after stage 1
    'fill="none" stroke="#22c55e" stroke-width="0.7"',   # after stage 2
    'fill="none" stroke="#14b8a6" stroke-width="0.7"',   # later stages
]


def _points_attr(contour) -> str:
    return " ".join(f"{float(x)!r},{float(y)!r}" for x, y in contour)


def _raster_png_b64(raster: np.ndarray) -> str:
    img = np.clip(np.asarray(raster, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 3:
        img = img[0]
    png = Image.fromarray((img * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    png.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def render_scene_svg(raster, gt_polygons=(), detections=(), scale: int = 4) -> str:
    """Compose the overlay SVG: raster underlay, dashed ground-truth
    polygons, one ring per recorded refinement stage, and score labels."""
    img = np.asarray(raster)
    h, w = (img.shape[1], img.shape[2]) if img.ndim == 3 else img.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" '
        f'viewBox="0 0 {w * scale} {h * scale}">',
        f'<g transform="scale({scale})">',
        f'<image x="0" y="0" width="{w}" height="{h}" style="image-rendering:pixelated" '
        f'href="data:image/png;base64,{_raster_png_b64(img)}"/>',
        '<g id="ground-truth">',
    ]
    for poly in gt_polygons:
        parts.append(f'<polygon points="{_points_attr(poly)}" {GT_STYLE}/>')
    parts.append("</g>")
    for det in detections:
        history = det.history if det.history else [(det.contour, det.score)]
        parts.append(f'<g id="detection-{det.index}">')
        for stage, (contour, score) in enumerate(history):
            style = STAGE_STYLES[min(stage, len(STAGE_STYLES) - 1)]
            parts.append(f'<polygon points="{_points_attr(contour)}" {style}/>')
        fx, fy = history[-1][0][0]
        parts.append(
            f'<text x="{float(fx)!r}" y="{float(fy) - 1.5!r}" font-size="3.2" '
            f'fill="#22c55e">{det.score:.3f}</text>')
        parts.append("</g>")
    parts.append("</g></svg>")
    return "\n".join(parts)


def save_svg(path, svg_text: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(svg_text)
