"""Synthetic curved-text scene generation with exact polygon ground truth.

A scene is a single-channel raster containing 1-4 bright "text bands":
sine-bent ribbons annotated with 14-vertex polygons (7 points along the
top edge, 7 along the bottom, clockwise), plus a few striped distractor
blobs that imitate text texture without being labeled. Generation is a
pure function of (seed, params): identical inputs give byte-identical
scenes.

Scene files are single JSON documents: header fields plus the raster as
base64-encoded little-endian float32. Polygons serialize as arrays of
[x, y] pairs. A dataset is a directory of scene files plus manifest.json.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.draw import disk as draw_disk
from skimage.draw import polygon as draw_polygon

from . import geometry

SCENE_FORMAT_VERSION = 1
BAND_POINTS_PER_EDGE = 7  # 14-vertex polygons, CTW1500-style line annotations


class DatasetError(ValueError):
    """Malformed dataset directory, manifest, or scene file."""


@dataclass
class GenParams:
    image_size: int = 128
    count_range: tuple[int, int] = (1, 4)
    band_height: tuple[float, float] = (9.0, 18.0)
    band_length: tuple[float, float] = (42.0, 92.0)
    amplitude: tuple[float, float] = (0.0, 9.0)
    cycles: tuple[float, float] = (0.4, 1.1)
    intensity: tuple[float, float] = (0.6, 0.95)
    stripe_period: tuple[float, float] = (4.0, 9.0)
    distractor_range: tuple[int, int] = (0, 3)
    distractor_radius: tuple[float, float] = (3.0, 7.0)
    distractor_intensity: tuple[float, float] = (0.45, 0.8)
    noise: float = 0.04
    margin: float = 5.0
    max_pairwise_iou: float = 0.3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown generator params: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class Scene:
    raster: np.ndarray  # [1, H, W] float32 in [0, 1]
    polygons: list      # list of (14, 2) float64 arrays, clockwise
    seed: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.raster.shape


def worker_count() -> int:
    """Worker cap for per-scene parallel work (CONTOUR_FORGE_THREADS)."""
    env = os.environ.get("CONTOUR_FORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DatasetError(f"CONTOUR_FORGE_THREADS must be an integer, got {env!r}")
    return max(1, os.cpu_count() or 1)


def _band_polygon(rng: np.random.Generator, params: GenParams) -> np.ndarray:
    size = params.image_size
    h = rng.uniform(*params.band_height)
    length = rng.uniform(*params.band_length)
    amp = rng.uniform(*params.amplitude)
    cycles = rng.uniform(*params.cycles)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    m = params.margin
    x0 = rng.uniform(m, max(m + 1.0, size - m - length))
    yc = rng.uniform(m + amp + h / 2, size - m - amp - h / 2)
    xs = x0 + np.linspace(0.0, length, BAND_POINTS_PER_EDGE)
    bend = amp * np.sin(2.0 * np.pi * cycles * (xs - x0) / length + phase)
    top = np.stack([xs, yc - h / 2 + bend], axis=1)
    bottom = np.stack([xs[::-1], (yc + h / 2 + bend)[::-1]], axis=1)
    return np.concatenate([top, bottom], axis=0)


def _render_band(raster: np.ndarray, poly: np.ndarray, rng: np.random.Generator,
                 params: GenParams) -> None:
    h, w = raster.shape
    rr, cc = draw_polygon(poly[:, 1], poly[:, 0], (h, w))
    base = rng.uniform(*params.intensity)
    period = rng.uniform(*params.stripe_period)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    stripes = 0.8 + 0.2 * np.sin(2.0 * np.pi * cc / period + phase)
    raster[rr, cc] = base * stripes


def _render_distractor(raster: np.ndarray, rng: np.random.Generator, params: GenParams,
                       keepout: list) -> None:
    h, w = raster.shape
    radius = rng.uniform(*params.distractor_radius)
    for _ in range(20):
        cy = rng.uniform(radius + 1, h - radius - 1)
        cx = rng.uniform(radius + 1, w - radius - 1)
        clear = all(
            cx < b[0] - radius or cx > b[2] + radius or cy < b[1] - radius or cy > b[3] + radius
            for b in keepout
        )
        if clear:
            break
    else:
        return
    rr, cc = draw_disk((cy, cx), radius, shape=(h, w))
    base = rng.uniform(*params.distractor_intensity)
    period = rng.uniform(*params.stripe_period)
    stripes = 0.8 + 0.2 * np.sin(2.0 * np.pi * cc / period)
    raster[rr, cc] = base * stripes


def generate_scene(seed: int, params: GenParams | None = None) -> Scene:
    """Render one scene deterministically from its seed."""
    params = params or GenParams()
    rng = np.random.default_rng(seed)
    size = params.image_size
    raster = np.zeros((size, size), dtype=np.float64)

    count = int(rng.integers(params.count_range[0], params.count_range[1] + 1))
    polygons: list[np.ndarray] = []
    attempts = 0
    while len(polygons) < count and attempts < 200:
        attempts += 1
        poly = _band_polygon(rng, params)
        if any(geometry.polygon_iou_safe(poly, p) >= params.max_pairwise_iou for p in polygons):
            continue
        # keep bands from touching: overlapping strokes confuse the labels
        box = geometry.polygon_bbox(poly)
        boxes = [geometry.polygon_bbox(p) for p in polygons]
        if any(geometry.box_iou(box, b) > 0.05 for b in boxes):
            continue
        polygons.append(poly)

    keepout = [geometry.polygon_bbox(p) for p in polygons]
    for poly in polygons:
        _render_band(raster, poly, rng, params)
    n_distractors = int(rng.integers(params.distractor_range[0], params.distractor_range[1] + 1))
    for _ in range(n_distractors):
        _render_distractor(raster, rng, params, keepout)

    if params.noise > 0:
        raster += rng.normal(0.0, params.noise, raster.shape)
    raster = np.clip(raster, 0.0, 1.0)
    return Scene(raster=raster[None, :, :].astype(np.float32), polygons=polygons, seed=seed)


# ---------------------------------------------------------------------------
# scene / dataset files


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format_version": SCENE_FORMAT_VERSION,
        "seed": scene.seed,
        "shape": list(scene.raster.shape),
        "dtype": "<f4",
        "polygons": [[[float(x), float(y)] for x, y in poly] for poly in scene.polygons],
        "raster_b64": base64.b64encode(
            np.ascontiguousarray(scene.raster, dtype="<f4").tobytes()
        ).decode("ascii"),
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        shape = tuple(d["shape"])
        raster = np.frombuffer(base64.b64decode(d["raster_b64"]), dtype=d["dtype"])
        raster = raster.reshape(shape).astype(np.float32)
        polygons = [np.asarray(p, dtype=np.float64) for p in d["polygons"]]
        return Scene(raster=raster, polygons=polygons, seed=int(d["seed"]))
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"malformed scene record: {exc}") from exc


def save_scene(path, scene: Scene) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(scene_to_dict(scene), f)


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as f:
        return scene_from_dict(json.load(f))


def scene_seeds(dataset_seed: int, count: int) -> list[int]:
    """Per-scene seeds derived deterministically from the dataset seed."""
    return [int(np.random.SeedSequence((dataset_seed, i)).generate_state(1)[0])
            for i in range(count)]


def split_assignment(dataset_seed: int, count: int, val_fraction: float = 0.2) -> list[str]:
    """Deterministic 80/20 train/val split derived from the dataset seed."""
    n_val = int(round(count * val_fraction))
    order = np.random.default_rng([dataset_seed, 777]).permutation(count)
    val = set(order[:n_val].tolist())
    return ["val" if i in val else "train" for i in range(count)]


def generate_dataset(out_dir, count: int, seed: int, params: GenParams | None = None,
                     force: bool = False) -> dict:
    """Write `count` scenes plus manifest.json into `out_dir`."""
    params = params or GenParams()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DatasetError(f"{out} exists and is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    seeds = scene_seeds(seed, count)
    splits = split_assignment(seed, count)
    entries = []
    for i, (s, sp) in enumerate(zip(seeds, splits)):
        name = f"scene_{i:05d}.json"
        save_scene(out / name, generate_scene(s, params))
        entries.append({"file": name, "seed": s, "split": sp})
    manifest = {
        "format_version": SCENE_FORMAT_VERSION,
        "seed": seed,
        "count": count,
        "params": params.to_dict(),
        "scenes": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_dataset(data_dir, split: str | None = None) -> list[Scene]:
    """Load scenes from a dataset directory, optionally one split only."""
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"{root} has no manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    scenes = []
    for entry in manifest["scenes"]:
        if split is not None and entry["split"] != split:
            continue
        scenes.append(load_scene(root / entry["file"]))
    return scenes
