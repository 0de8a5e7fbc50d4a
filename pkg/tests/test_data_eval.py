"""Scene generator contracts and the evaluation protocol."""

import json

import numpy as np
import pytest

from contour_forge import geometry as G
from contour_forge.evaluate import evaluate, evaluate_dataset, f_measure, timing_harness
from contour_forge.model import Detection
from contour_forge.synth import (
    GenParams,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_scene,
    save_scene,
    scene_seeds,
    split_assignment,
)


def det(contour, score=0.9, index=0):
    return Detection(contour=np.asarray(contour, float), score=score, stage=2,
                     box=G.polygon_bbox(contour), index=index)


def rect(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float)


# --- generator ---------------------------------------------------------------


def test_generator_deterministic():
    a = generate_scene(123)
    b = generate_scene(123)
    assert a.raster.tobytes() == b.raster.tobytes()
    assert len(a.polygons) == len(b.polygons)
    assert all(np.array_equal(x, y) for x, y in zip(a.polygons, b.polygons))


def test_generator_zero_count_is_background_only():
    scene = generate_scene(5, GenParams(count_range=(0, 0)))
    assert scene.polygons == []


def test_generator_polygons_inside_bounds():
    for seed in range(12):
        scene = generate_scene(seed)
        for poly in scene.polygons:
            x0, y0, x1, y1 = G.polygon_bbox(poly)
            assert x0 >= 0 and y0 >= 0 and x1 <= 128 and y1 <= 128


def test_generator_instance_separation():
    for seed in range(20):
        scene = generate_scene(seed)
        polys = scene.polygons
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                assert G.polygon_iou_safe(polys[i], polys[j]) < 0.3


def test_zero_curvature_bands_are_boxlike():
    params = GenParams(amplitude=(0.0, 0.0))
    for seed in range(8):
        scene = generate_scene(seed, params)
        for poly in scene.polygons:
            x0, y0, x1, y1 = G.polygon_bbox(poly)
            assert G.polygon_iou_safe(poly, rect(x0, y0, x1, y1)) > 0.8


def test_band_polygons_are_simple_and_clockwise():
    for seed in range(10):
        for poly in generate_scene(seed).polygons:
            assert len(poly) == 14
            assert G.is_clockwise(poly)
            G.polygon_iou(poly, poly)  # raises if self-intersecting


# --- scene and dataset files ---------------------------------------------------


def test_scene_file_roundtrip(tmp_path):
    scene = generate_scene(9)
    path = tmp_path / "scene.json"
    save_scene(path, scene)
    loaded = load_scene(path)
    assert loaded.seed == scene.seed
    assert loaded.raster.tobytes() == scene.raster.tobytes()
    assert all(np.array_equal(a, b) for a, b in zip(loaded.polygons, scene.polygons))
    # polygons are stored as arrays of [x, y] pairs
    raw = json.loads(path.read_text())
    assert all(len(pt) == 2 for poly in raw["polygons"] for pt in poly)


def test_dataset_split_is_deterministic_80_20(tmp_path):
    manifest = generate_dataset(tmp_path / "ds", count=20, seed=4)
    splits = [e["split"] for e in manifest["scenes"]]
    assert splits.count("val") == 4 and splits.count("train") == 16
    assert splits == split_assignment(4, 20)
    assert [e["seed"] for e in manifest["scenes"]] == scene_seeds(4, 20)
    train = load_dataset(tmp_path / "ds", split="train")
    assert len(train) == 16


def test_dataset_refuses_nonempty_dir(tmp_path):
    from contour_forge.synth import DatasetError

    d = tmp_path / "ds"
    generate_dataset(d, count=2, seed=0)
    with pytest.raises(DatasetError):
        generate_dataset(d, count=2, seed=0)
    generate_dataset(d, count=2, seed=0, force=True)  # force overwrites


# --- evaluation protocol ----------------------------------------------------------


def test_perfect_detections_score_one():
    gts = [rect(0, 0, 10, 5), rect(20, 20, 40, 28)]
    dets = [det(g, index=i) for i, g in enumerate(gts)]
    m = evaluate(dets, gts)
    report = evaluate_dataset([m])
    assert report.precision == report.recall == report.f_measure == 1.0


def test_empty_detections_give_zero():
    report = evaluate_dataset([evaluate([], [rect(0, 0, 5, 5)])])
    assert report.precision == 0.0 and report.recall == 0.0 and report.f_measure == 0.0


def test_golden_two_thirds():
    # 3 ground truths, 2 accurate detections and 1 spurious -> P = R = F = 2/3
    gts = [rect(0, 0, 10, 5), rect(20, 0, 30, 5), rect(40, 0, 50, 5)]
    dets = [det(gts[0], 0.9, 0), det(gts[1], 0.8, 1), det(rect(70, 70, 80, 75), 0.7, 2)]
    report = evaluate_dataset([evaluate(dets, gts)])
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)
    assert report.f_measure == pytest.approx(2 / 3)


def test_duplicate_detections_yield_single_match():
    gt = [rect(0, 0, 10, 10)]
    dets = [det(gt[0], 0.9, 0), det(gt[0], 0.8, 1)]
    m = evaluate(dets, gt)
    assert len(m.matches) == 1
    assert m.matches[0][0] == 0  # higher score wins the match


def test_matching_is_permutation_invariant_in_gts():
    gts = [rect(0, 0, 10, 5), rect(20, 0, 30, 5)]
    dets = [det(gts[1], 0.9, 0), det(gts[0], 0.8, 1)]
    a = evaluate(dets, gts)
    b = evaluate(dets, gts[::-1])
    assert len(a.matches) == len(b.matches) == 2


def test_equal_scores_break_ties_by_index():
    gt = [rect(0, 0, 10, 10)]
    dets = [det(gt[0], 0.5, 0), det(gt[0], 0.5, 1)]
    m = evaluate(dets, gt)
    assert m.matches[0][0] == 0


def test_f_measure_definition():
    assert f_measure(0.0, 0.0) == 0.0
    assert f_measure(0.5, 1.0) == pytest.approx(2 / 3)


# --- timing ---------------------------------------------------------------------


class _StubModel:
    def detect(self, raster, **kw):
        class R:
            detections = []
            all_detections = []
            refine_calls = []
        return R()


def test_timing_needs_scenes():
    with pytest.raises(ValueError):
        timing_harness(_StubModel(), [])


def test_timing_returns_positive_mean():
    scenes = [generate_scene(s, GenParams(image_size=32, band_length=(10, 20),
                                          band_height=(4, 8), margin=3))
              for s in range(3)]
    assert timing_harness(_StubModel(), scenes, warmup=1) >= 0.0
