"""Detection evaluation: greedy one-to-one matching at a polygon-IoU
threshold, micro-averaged precision/recall/F-measure, and wall-clock
timing of single-scene inference.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .synth import worker_count

DEFAULT_IOU_THRESH = 0.5


@dataclass
class SceneMatches:
    """Matching outcome for one scene."""

    matches: list = field(default_factory=list)  # (det_index, gt_index, iou)
    n_dets: int = 0
    n_gts: int = 0

    def to_dict(self) -> dict:
        return {
            "matches": [[int(d), int(g), float(i)] for d, g, i in self.matches],
            "n_dets": self.n_dets,
            "n_gts": self.n_gts,
        }


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_measure: float
    scenes: list  # list of SceneMatches
    mean_seconds_per_scene: float | None = None

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f_measure": self.f_measure,
            "mean_seconds_per_scene": self.mean_seconds_per_scene,
            "scenes": [s.to_dict() for s in self.scenes],
        }


def f_measure(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def evaluate(detections, gt_polygons, iou_thresh: float = DEFAULT_IOU_THRESH) -> SceneMatches:
    """Greedily match detections (descending score, ties by lower index)
    against unmatched ground-truth polygons at the IoU threshold.

    Matching is one-to-one: duplicate detections of the same ground truth
    contribute a single true positive.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    taken: set[int] = set()
    out = SceneMatches(n_dets=len(detections), n_gts=len(gt_polygons))
    for i in order:
        contour = detections[i].contour
        best_iou, best_j = 0.0, None
        for j, gt in enumerate(gt_polygons):
            if j in taken:
                continue
            iou = geometry.polygon_iou_safe(contour, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j is not None and best_iou >= iou_thresh:
            taken.add(best_j)
            out.matches.append((i, best_j, best_iou))
    return out


def evaluate_dataset(per_scene, mean_seconds: float | None = None) -> EvalReport:
    """Micro-averaged report over per-scene match results."""
    total_m = sum(len(s.matches) for s in per_scene)
    total_d = sum(s.n_dets for s in per_scene)
    total_g = sum(s.n_gts for s in per_scene)
    p = total_m / total_d if total_d else 0.0
    r = total_m / total_g if total_g else 0.0
    return EvalReport(
        precision=p,
        recall=r,
        f_measure=f_measure(p, r),
        scenes=list(per_scene),
        mean_seconds_per_scene=mean_seconds,
    )


def evaluate_model(model, scenes, iou_thresh: float = DEFAULT_IOU_THRESH,
                   parallel: bool = False, **detect_kwargs) -> EvalReport:
    """Run inference on each scene and evaluate against its polygons."""

    def one(scene):
        result = model.detect(scene.raster, **detect_kwargs)
        return evaluate(result.detections, scene.polygons, iou_thresh)

    if parallel and len(scenes) > 1:
        with ThreadPoolExecutor(max_workers=worker_count()) as ex:
            per_scene = list(ex.map(one, scenes))
    else:
        per_scene = [one(s) for s in scenes]
    return evaluate_dataset(per_scene)


def timing_harness(model, scenes, warmup: int = 2, **detect_kwargs) -> float:
    """Mean wall-clock seconds per scene, one scene per call.

    Warmup passes run first and are excluded from the mean.
    """
    if len(scenes) == 0:
        raise ValueError("timing_harness needs at least one scene")
    for scene in scenes[:warmup]:
        model.detect(scene.raster, **detect_kwargs)
    start = time.perf_counter()
    for scene in scenes:
        model.detect(scene.raster, **detect_kwargs)
    return (time.perf_counter() - start) / len(scenes)


def score_iou_pairs(model, scenes, **detect_kwargs) -> tuple[np.ndarray, np.ndarray]:
    """(score, best polygon IoU) for every scored contour on the given
    scenes, before the final confidence filter; used to measure how well
    contour confidence ranks contour quality."""
    scores, ious = [], []
    for scene in scenes:
        result = model.detect(scene.raster, **detect_kwargs)
        for det in result.all_detections:
            best = 0.0
            for gt in scene.polygons:
                best = max(best, geometry.polygon_iou_safe(det.contour, gt))
            scores.append(det.score)
            ious.append(best)
    return np.asarray(scores), np.asarray(ious)
