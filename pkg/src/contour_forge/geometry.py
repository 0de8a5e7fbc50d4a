"""Polygon, box, sampling, and matching arithmetic.

Everything in this module is plain numpy over float64. Conventions:

* points are (x, y) in image coordinates (y grows downward),
* a polygon is an (N, 2) array of boundary points, implicitly closed,
* "clockwise" means clockwise on screen, which with a downward y axis
  corresponds to a positive shoelace sum,
* a box is the 4-tuple (x_min, y_min, x_max, y_max).

Contours are fixed-length vertex rings stored as (n, 2) arrays; index
arithmetic on them is modular.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from shapely.geometry import Polygon as _ShapelyPolygon


class DegenerateGeometryError(ValueError):
    """Raised for boxes or polygons with no usable area."""


class MatchResult(NamedTuple):
    """Outcome of matching one predicted box against the ground-truth set."""

    gt_index: int | None
    best_iou: float
    is_false_positive: bool


FALSE_POSITIVE_IOU = 0.5
# Boundary resolution used when building contour targets: the polygon is
# densified so that consecutive points are at most perimeter/256 apart.
DENSIFY_DIVISIONS = 256


# ---------------------------------------------------------------------------
# basic polygon helpers


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an (N, 2) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    return pts


def signed_area(points) -> float:
    """Shoelace sum / 2; positive for clockwise rings in image coordinates."""
    pts = as_points(points)
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return float(0.5 * np.sum(x * yn - xn * y))


def is_clockwise(points) -> bool:
    return signed_area(points) > 0.0


def normalize_polygon(points) -> np.ndarray:
    """Return a clean polygon: consecutive duplicates removed, clockwise order.

    Raises DegenerateGeometryError when fewer than 3 distinct points remain
    or the ring has (numerically) zero area.
    """
    pts = as_points(points)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    pts = pts[keep]
    if len(pts) > 1 and np.all(pts[0] == pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise DegenerateGeometryError("polygon needs at least 3 distinct points")
    area = signed_area(pts)
    if abs(area) < 1e-12:
        raise DegenerateGeometryError("polygon has zero area")
    if area < 0:
        pts = pts[::-1].copy()
    return pts


def polygon_edges(points) -> tuple[np.ndarray, np.ndarray]:
    """(edge start points, edge vectors) for the closed ring."""
    pts = as_points(points)
    nxt = np.roll(pts, -1, axis=0)
    return pts, nxt - pts


def polygon_perimeter(points) -> float:
    _, vecs = polygon_edges(points)
    return float(np.hypot(vecs[:, 0], vecs[:, 1]).sum())


def polygon_bbox(points) -> tuple[float, float, float, float]:
    pts = as_points(points)
    return (
        float(pts[:, 0].min()),
        float(pts[:, 1].min()),
        float(pts[:, 0].max()),
        float(pts[:, 1].max()),
    )


def validate_box(box) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = (float(v) for v in box)
    if not all(math.isfinite(v) for v in (x0, y0, x1, y1)):
        raise DegenerateGeometryError("box coordinates must be finite")
    if not (x0 < x1 and y0 < y1):
        raise DegenerateGeometryError(f"degenerate box {(x0, y0, x1, y1)}")
    return x0, y0, x1, y1


def box_area(box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


# ---------------------------------------------------------------------------
# perimeter sampling and densification


def box_perimeter_sample(box, count: int) -> np.ndarray:
    """Uniform arc-length samples on a box perimeter.

    Samples run clockwise starting at the top-left corner (top edge first),
    spaced perimeter/count apart.
    """
    x0, y0, x1, y1 = validate_box(box)
    if count < 4:
        raise ValueError(f"need at least 4 perimeter samples, got {count}")
    w, h = x1 - x0, y1 - y0
    per = 2.0 * (w + h)
    s = np.arange(count, dtype=np.float64) * (per / count)
    top = s < w
    right = (s >= w) & (s < w + h)
    bottom = (s >= w + h) & (s < 2 * w + h)
    x = np.where(top, x0 + s, np.where(right, x1, np.where(bottom, x1 - (s - w - h), x0)))
    y = np.where(top, y0, np.where(right, y0 + (s - w), np.where(bottom, y1, y1 - (s - 2 * w - h))))
    return np.stack([x, y], axis=1)


def box_arc_position(box, point) -> float:
    """Arc-length coordinate of a point lying on the box perimeter."""
    x0, y0, x1, y1 = validate_box(box)
    w, h = x1 - x0, y1 - y0
    px, py = float(point[0]), float(point[1])
    tol = 1e-9 * max(w, h, 1.0)
    if abs(py - y0) < tol and x0 - tol <= px <= x1 + tol:
        return px - x0
    if abs(px - x1) < tol and y0 - tol <= py <= y1 + tol:
        return w + (py - y0)
    if abs(py - y1) < tol and x0 - tol <= px <= x1 + tol:
        return w + h + (x1 - px)
    if abs(px - x0) < tol and y0 - tol <= py <= y1 + tol:
        return 2 * w + h + (y1 - py)
    raise ValueError(f"point {point} does not lie on the box perimeter")


def densify_polygon(points, step: float) -> np.ndarray:
    """Insert points along each edge so consecutive gaps are at most `step`.

    Original vertices are preserved; inserted points subdivide each edge
    uniformly. Total perimeter is unchanged.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    pts, vecs = polygon_edges(points)
    out = []
    for p, v in zip(pts, vecs):
        length = math.hypot(v[0], v[1])
        pieces = max(1, math.ceil(length / step - 1e-12))
        ts = np.arange(pieces, dtype=np.float64) / pieces
        out.append(p[None, :] + ts[:, None] * v[None, :])
    return np.concatenate(out, axis=0)


def nearest_l1_assignment(samples, boundary) -> np.ndarray:
    """Snap each sample to the boundary point with minimal L1 distance.

    Ties resolve to the smallest boundary index. The boundary is expected
    to be densified beforehand; outputs are members of it.
    """
    samples = as_points(samples)
    boundary = as_points(boundary)
    if len(boundary) == 0:
        raise ValueError("boundary is empty")
    d = np.abs(samples[:, None, :] - boundary[None, :, :]).sum(axis=2)
    idx = np.argmin(d, axis=1)  # first minimum = lowest index
    return boundary[idx].copy()


# ---------------------------------------------------------------------------
# contour targets


def initial_contour_target(polygon, n_vertices: int) -> np.ndarray:
    """Coarse n-vertex ring for a polygon: box-perimeter samples snapped to
    the densified boundary by L1 distance.

    Sample 0 sits at the box's top-left corner, so the ring starts near the
    boundary point closest to that corner and runs clockwise.
    """
    poly = normalize_polygon(polygon)
    box = polygon_bbox(poly)
    samples = box_perimeter_sample(box, n_vertices)
    dense = densify_polygon(poly, polygon_perimeter(poly) / DENSIFY_DIVISIONS)
    return nearest_l1_assignment(samples, dense)


def _nearest_arc_position(poly: np.ndarray, point) -> float:
    """Arc-length position of the boundary point nearest to `point`.

    Exact segment projection; ties resolve to the lowest edge index.
    """
    pts, vecs = polygon_edges(poly)
    lengths = np.hypot(vecs[:, 0], vecs[:, 1])
    q = np.asarray(point, dtype=np.float64)
    best_d2, best_pos = math.inf, 0.0
    cum = 0.0
    for p, v, length in zip(pts, vecs, lengths):
        denom = length * length
        t = 0.0 if denom == 0 else float(np.clip(np.dot(q - p, v) / denom, 0.0, 1.0))
        proj = p + t * v
        d2 = float(np.sum((q - proj) ** 2))
        if d2 < best_d2 - 1e-15:
            best_d2, best_pos = d2, cum + t * length
        cum += length
    return best_pos


def points_at_arc_positions(poly: np.ndarray, positions) -> np.ndarray:
    """Interpolate boundary points at given arc-length positions."""
    pts, vecs = polygon_edges(poly)
    lengths = np.hypot(vecs[:, 0], vecs[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    per = cum[-1]
    s = np.asarray(positions, dtype=np.float64) % per
    edges = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(pts) - 1)
    t = (s - cum[edges]) / np.where(lengths[edges] > 0, lengths[edges], 1.0)
    return pts[edges] + t[:, None] * vecs[edges]


def uniform_contour_target(polygon, n_vertices: int) -> np.ndarray:
    """n-vertex ring uniformly spaced by arc length along the polygon.

    Starts at the boundary point nearest the bounding box's top-left corner
    and runs clockwise (the polygon is normalized first).
    """
    poly = normalize_polygon(polygon)
    per = polygon_perimeter(poly)
    x0, y0, _, _ = polygon_bbox(poly)
    start = _nearest_arc_position(poly, (x0, y0))
    positions = start + per * np.arange(n_vertices, dtype=np.float64) / n_vertices
    return points_at_arc_positions(poly, positions)


def mean_boundary_distance(contour, polygon) -> float:
    """Mean distance from contour vertices to the polygon boundary."""
    poly = normalize_polygon(polygon)
    pts, vecs = polygon_edges(poly)
    lengths2 = np.sum(vecs**2, axis=1)
    c = as_points(contour)
    rel = c[:, None, :] - pts[None, :, :]
    t = np.clip(
        np.sum(rel * vecs[None, :, :], axis=2) / np.where(lengths2 > 0, lengths2, 1.0),
        0.0,
        1.0,
    )
    proj = pts[None, :, :] + t[:, :, None] * vecs[None, :, :]
    d = np.sqrt(np.sum((c[:, None, :] - proj) ** 2, axis=2))
    return float(d.min(axis=1).mean())


# ---------------------------------------------------------------------------
# overlap measures


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = validate_box(a)
    bx0, by0, bx1, by1 = validate_box(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def polygon_iou(a, b) -> float:
    """Exact area IoU of two simple polygons via polygon clipping."""
    pa = _ShapelyPolygon(as_points(a))
    pb = _ShapelyPolygon(as_points(b))
    if not pa.is_valid or not pb.is_valid:
        raise ValueError("polygon_iou requires simple (non-self-intersecting) polygons")
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def _rasterized_iou(a: np.ndarray, b: np.ndarray, upscale: int = 4) -> float:
    from skimage.draw import polygon as draw_polygon

    allpts = np.concatenate([a, b], axis=0)
    x0, y0 = allpts.min(axis=0) - 1
    h = int(math.ceil((allpts[:, 1].max() + 1 - y0) * upscale)) + 1
    w = int(math.ceil((allpts[:, 0].max() + 1 - x0) * upscale)) + 1
    masks = []
    for pts in (a, b):
        rr, cc = draw_polygon((pts[:, 1] - y0) * upscale, (pts[:, 0] - x0) * upscale, (h, w))
        m = np.zeros((h, w), dtype=bool)
        m[rr, cc] = True
        masks.append(m)
    inter = np.logical_and(*masks).sum()
    union = np.logical_or(*masks).sum()
    return float(inter / union) if union else 0.0


def polygon_iou_safe(a, b) -> float:
    """IoU that tolerates slightly invalid rings (for evaluating predictions).

    Invalid rings are repaired with a zero-width buffer; if that still fails
    the overlap is rasterized on a 4x grid instead of crashing.
    """
    a = as_points(a)
    b = as_points(b)
    try:
        pa = _ShapelyPolygon(a)
        pb = _ShapelyPolygon(b)
        if not pa.is_valid:
            pa = pa.buffer(0)
        if not pb.is_valid:
            pb = pb.buffer(0)
        if pa.is_empty or pb.is_empty:
            return 0.0
        inter = pa.intersection(pb).area
        union = pa.area + pb.area - inter
        return float(inter / union) if union > 0 else 0.0
    except Exception:
        return _rasterized_iou(a, b)


def match_to_ground_truth(pred_box, gt_boxes: Sequence) -> MatchResult:
    """Best-IoU match of a predicted box against ground-truth boxes.

    With no ground truth at all the prediction is a false positive with
    IoU 0. Ties resolve to the lowest ground-truth index.
    """
    if len(gt_boxes) == 0:
        return MatchResult(None, 0.0, True)
    ious = np.array([box_iou(pred_box, g) for g in gt_boxes])
    k = int(np.argmax(ious))
    best = float(ious[k])
    return MatchResult(k, best, best < FALSE_POSITIVE_IOU)


# ---------------------------------------------------------------------------
# cyclic contour alignment


def huber(d: np.ndarray) -> np.ndarray:
    """Elementwise smooth-L1: 0.5 d^2 below 1, |d| - 0.5 above."""
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def cyclic_pair_loss(pred, gt, shift: int) -> float:
    """Ring loss at one shift: per-vertex smooth-L1 (mean over x/y), summed."""
    pred = as_points(pred)
    gt = as_points(gt)
    n = len(pred)
    aligned = gt[(shift + np.arange(n)) % n]
    return float(huber(pred - aligned).mean(axis=1).sum())


def cyclic_alignment(pred, gt) -> tuple[int, float]:
    """Best cyclic alignment of two equal-length vertex rings.

    Searches all n shifts of the target ring and returns (shift, loss) for
    the minimizing one, where vertex i of `pred` is compared against vertex
    (shift + i) mod n of `gt`. Ties resolve to the smallest shift.
    """
    pred = as_points(pred)
    gt = as_points(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"contour length mismatch: {pred.shape} vs {gt.shape}")
    n = len(pred)
    shifts = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n
    diffs = pred[None, :, :] - gt[shifts]
    totals = huber(diffs).mean(axis=2).sum(axis=1)
    u = int(np.argmin(totals))
    return u, float(totals[u])
