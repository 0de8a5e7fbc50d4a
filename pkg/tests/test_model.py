"""Model-stack tests: shapes, decoding, token sampling, encoder behavior,
refinement, and the staged inference loop."""

import numpy as np
import pytest

from contour_forge import autodiff as ad
from contour_forge import geometry as G
from contour_forge.config import RunConfig
from contour_forge.model import ContourDetector, InitHeadOutput, sigmoid_np


def small_config(**kw):
    base = dict(image_size=64, train_dtype="float64", seed=3,
                n_vertices=16, encoder_layers=2, channels=32, heads=4, stages=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def model():
    return ContourDetector(small_config())


@pytest.fixture(scope="module")
def raster():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (1, 64, 64))


# --- shapes -------------------------------------------------------------------


@pytest.mark.parametrize("na", [16, 24, 32, 40, 48])
def test_shapes_across_vertex_counts(na):
    cfg = small_config(n_vertices=na, encoder_layers=1)
    m = ContourDetector(cfg)
    fm = m.backbone_forward(np.zeros((1, 64, 64)))
    assert fm.tensor.shape == (32, 16, 16) and fm.stride == 4.0
    head = m.init_head_forward(fm)
    assert head.cls_map.shape == (1, 16, 16)
    assert head.box_map.shape == (4, 16, 16)
    assert head.offset_map.shape == (2 * na, 16, 16)
    out = m.contour_transformer_forward(fm, np.full((na, 2), 20.0), stage=0)
    assert out.offsets.shape == (na, 2)
    assert out.score_logit.shape == ()


def test_default_config_matches_reference_hyperparameters():
    cfg = RunConfig()
    assert cfg.n_vertices == 32 and cfg.encoder_layers == 4 and cfg.stages == 2
    assert cfg.tau_a == 0.45 and cfg.tau_b == 0.5
    assert (cfg.lambda_box, cfg.lambda_off1, cfg.lambda_off2, cfg.lambda_rescore) == (1, 1, 0.1, 2)
    m = ContourDetector(RunConfig(image_size=64, train_dtype="float64"))
    assert len(m.stage_params) == 2
    assert all(len(sp.layers) == 4 for sp in m.stage_params)


# --- backbone -----------------------------------------------------------------


def test_backbone_zero_input_finite(model):
    fm = model.backbone_forward(np.zeros((1, 64, 64)))
    assert np.all(np.isfinite(fm.tensor.data))


def test_backbone_deterministic(model, raster):
    a = model.backbone_forward(raster).tensor.data
    b = model.backbone_forward(raster).tensor.data
    assert np.array_equal(a, b)


def test_backbone_translation_covariance(model, raster):
    # shifting the scene by one stride shifts features by one cell (borders aside)
    shift = 4
    shifted = np.roll(raster, shift, axis=2)
    f0 = model.backbone_forward(raster).tensor.data
    f1 = model.backbone_forward(shifted).tensor.data
    inner0 = f0[:, 2:-2, 2:-2]
    inner1 = np.roll(f1, -1, axis=2)[:, 2:-2, 2:-2]
    corr = np.corrcoef(inner0.ravel(), inner1.ravel())[0, 1]
    assert corr > 0.9


# --- init head / decoding ---------------------------------------------------------


def test_box_map_is_positive(model, raster):
    head = model.init_head_forward(model.backbone_forward(raster))
    assert head.box_map.data.min() > 0.0


def make_head_output(h=16, w=16, na=16, hot=None, cls_logit=3.0,
                     distances=(4.0, 2.0, 4.0, 2.0), offsets=None):
    cls = np.full((1, h, w), -10.0)
    box = np.full((4, h, w), 1.0)
    off = np.zeros((2 * na, h, w))
    if hot is not None:
        r, c = hot
        cls[0, r, c] = cls_logit
        box[:, r, c] = distances
        if offsets is not None:
            off[:, r, c] = offsets
    return InitHeadOutput(cls_map=ad.Tensor(cls), box_map=ad.Tensor(box),
                          offset_map=ad.Tensor(off))


def test_decode_empty_when_all_below_threshold(model):
    out = make_head_output()
    assert model.decode_initial_contours(out, tau_a=0.45) == []


def test_decode_zero_offsets_equals_box_samples(model):
    out = make_head_output(hot=(8, 8))
    dets = model.decode_initial_contours(out, tau_a=0.45)
    assert len(dets) == 1
    d = dets[0]
    # box: center (8.5, 8.5) with distances (4,2,4,2) in grid units, scene = x4
    expected_box = ((8.5 - 4) * 4, (8.5 - 2) * 4, (8.5 + 4) * 4, (8.5 + 2) * 4)
    assert np.allclose(d.box, expected_box)
    samples = G.box_perimeter_sample(expected_box, 16)
    assert np.allclose(d.contour, samples, atol=1e-9)
    assert d.stage == 0 and d.score == pytest.approx(float(sigmoid_np(3.0)))


def test_decode_hand_computed_offsets(model):
    rng = np.random.default_rng(5)
    offsets = rng.uniform(-1, 1, 32)
    out = make_head_output(hot=(4, 10), offsets=offsets)
    d = model.decode_initial_contours(out, tau_a=0.45)[0]
    box_grid = (10.5 - 4, 4.5 - 2, 10.5 + 4, 4.5 + 2)
    expected = (G.box_perimeter_sample(box_grid, 16) + offsets.reshape(16, 2)) * 4.0
    assert np.abs(d.contour - expected).max() < 1e-6


def test_decode_caps_and_orders_by_score(model):
    out = make_head_output(hot=(2, 2), cls_logit=1.0)
    out.cls_map.data[0, 9, 9] = 2.0
    out.cls_map.data[0, 5, 5] = 1.5
    dets = model.decode_initial_contours(out, tau_a=0.45, max_detections=2)
    assert len(dets) == 2
    assert dets[0].cell == (9, 9) and dets[1].cell == (5, 5)


# --- token sampling -----------------------------------------------------------


def test_vertex_token_at_cell_center(model, raster):
    fm = model.backbone_forward(raster)
    # scene point at the center of cell (3, 5) -> lattice node (5, 3)
    scene_pt = np.array([[5.5 * 4, 3.5 * 4]])
    tok = model.sample_vertex_tokens(fm, scene_pt, model.stage_params[0].x_cls)
    assert np.allclose(tok.data[0], fm.tensor.data[:, 3, 5])
    assert np.array_equal(tok.data[-1], model.stage_params[0].x_cls.data[0])


def test_identical_vertices_give_identical_tokens(model, raster):
    fm = model.backbone_forward(raster)
    contour = np.full((16, 2), 31.7)
    tok = model.sample_vertex_tokens(fm, contour, model.stage_params[0].x_cls)
    assert np.all(tok.data[:16] == tok.data[0])


# --- encoder ------------------------------------------------------------------


def test_encoder_layer_preserves_shape(model):
    z = ad.Tensor(np.random.default_rng(1).normal(size=(17, 32)))
    out = model.encoder_layer(z, model.stage_params[0].layers[0])
    assert out.shape == (17, 32)


def test_transformer_permutation_equivariance(model, raster):
    # permuting vertex tokens permutes regressed offsets and leaves the
    # confidence logit unchanged (no positional encoding on the ring)
    fm = model.backbone_forward(raster)
    rng = np.random.default_rng(2)
    contour = rng.uniform(8, 56, (16, 2))
    perm = rng.permutation(16)
    base = model.contour_transformer_forward(fm, contour, stage=0)
    permuted = model.contour_transformer_forward(fm, contour[perm], stage=0)
    assert np.allclose(permuted.offsets.data, base.offsets.data[perm], atol=1e-10)
    assert float(permuted.score_logit.data) == pytest.approx(
        float(base.score_logit.data), abs=1e-12)


def test_transformer_eval_deterministic(model, raster):
    fm = model.backbone_forward(raster)
    contour = np.random.default_rng(3).uniform(8, 56, (16, 2))
    a = model.contour_transformer_forward(fm, contour, 0, train=False)
    b = model.contour_transformer_forward(fm, contour, 0, train=False)
    assert np.array_equal(a.offsets.data, b.offsets.data)
    assert float(a.score_logit.data) == float(b.score_logit.data)


def test_encoder_layer_gradient_check(model):
    rng = np.random.default_rng(4)
    from contour_forge.gradcheck import fd_check

    def make(r):
        z = ad.Tensor(r.normal(size=(9, 32)), requires_grad=True)
        lw = model.stage_params[0].layers[0]
        return {"z": z}, lambda: model.encoder_layer(z, lw).sum()

    assert fd_check(make, rng, max_elements=60) < 1e-4


# --- refinement ---------------------------------------------------------------


def test_refine_zero_offsets_keeps_contour(model):
    from contour_forge.model import Detection, RefinementOutput

    contour = np.random.default_rng(5).uniform(10, 50, (16, 2))
    det = Detection(contour=contour.copy(), score=0.4, stage=0,
                    box=(0, 0, 1, 1), history=[(contour.copy(), 0.4)])
    out = RefinementOutput(offsets=ad.Tensor(np.zeros((16, 2))),
                           score_logit=ad.Tensor(np.array(0.7)))
    refined = model.refine(det, out)
    assert np.array_equal(refined.contour, contour)
    assert refined.stage == 1
    assert refined.score == pytest.approx(float(sigmoid_np(0.7)))
    assert len(refined.history) == 2


def test_refine_exact_offsets_reach_target(model):
    from contour_forge.model import Detection, RefinementOutput

    rng = np.random.default_rng(6)
    contour = rng.uniform(10, 50, (16, 2))
    target = rng.uniform(10, 50, (16, 2))
    det = Detection(contour=contour, score=0.4, stage=0, box=(0, 0, 1, 1))
    out = RefinementOutput(offsets=ad.Tensor((target - contour) / model.stride),
                           score_logit=ad.Tensor(np.array(0.0)))
    refined = model.refine(det, out)
    assert np.abs(refined.contour - target).max() < 1e-9
    assert refined.box == (target[:, 0].min(), target[:, 1].min(),
                           target[:, 0].max(), target[:, 1].max())


# --- staged inference ------------------------------------------------------------


def _forced_score_model(bias: float, **kw) -> ContourDetector:
    """Model whose refinement scores are saturated via the cls-head bias."""
    m = ContourDetector(small_config(**kw))
    for sp in m.stage_params:
        sp.cls.fc3.b.data[:] = bias
        sp.cls.fc3.w.data[:] = 0.0
    # make a couple of cells fire at decode time
    m.params["init_head/out/b"].data[0] = 1.0
    return m


def test_early_stop_skips_stage_two(raster):
    m = _forced_score_model(bias=8.0)  # every refined score ~ 1 >= tau_b
    result = m.detect(raster)
    assert result.refine_calls[0] > 0
    assert result.refine_calls[1] == 0


def test_all_scores_below_threshold_gives_empty_output(raster):
    m = _forced_score_model(bias=-8.0)  # every refined score ~ 0
    result = m.detect(raster)
    assert result.detections == []
    assert result.refine_calls[0] > 0
    assert result.refine_calls[1] > 0  # nothing froze, everything re-refined


def test_raising_tau_b_never_reduces_refinement_calls(raster):
    m = ContourDetector(small_config(seed=11))
    m.params["init_head/out/b"].data[0] = 1.0
    totals = []
    for tau_b in (0.1, 0.3, 0.5, 0.7, 0.9):
        result = m.detect(raster, tau_b=tau_b)
        totals.append(sum(result.refine_calls))
    assert all(a <= b for a, b in zip(totals, totals[1:]))


def test_multi_stage_inference_returns_detection_list(model, raster):
    dets = model.multi_stage_inference(model.backbone_forward(raster))
    assert isinstance(dets, list)


def test_requesting_more_stages_than_built_fails(model, raster):
    from contour_forge.config import ConfigError

    with pytest.raises(ConfigError):
        model.detect(raster, stages=5)


# --- persistence -----------------------------------------------------------------


def test_model_checkpoint_roundtrip(tmp_path, raster):
    cfg = small_config(train_dtype="float32", seed=21)
    m = ContourDetector(cfg)
    path = tmp_path / "model.bin"
    m.save(path, step=5)
    m2, cfg2, step = ContourDetector.from_checkpoint(path)
    assert step == 5 and cfg2 == cfg
    a = m.backbone_forward(raster).tensor.data
    b = m2.backbone_forward(raster).tensor.data
    assert np.array_equal(a, b)
