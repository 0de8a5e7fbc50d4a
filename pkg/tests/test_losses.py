"""Loss-term values, identities, and gradient behavior."""

import numpy as np
import pytest

from contour_forge import autodiff as ad
from contour_forge import geometry as G
from contour_forge.losses import (
    bce_loss,
    cyclic_deformation_loss,
    giou_loss,
    quality_focal_loss,
    smooth_l1,
)


def t(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- smooth L1 ---------------------------------------------------------------


def test_smooth_l1_zero_at_equality():
    v = np.array([1.0, -2.0, 3.5])
    assert float(smooth_l1(t(v), t(v)).data) == 0.0


def test_smooth_l1_quadratic_branch():
    assert float(smooth_l1(t([0.5]), t([0.0])).data) == pytest.approx(0.125)


def test_smooth_l1_linear_branch():
    assert float(smooth_l1(t([3.0]), t([0.0])).data) == pytest.approx(2.5)


# --- GIoU ---------------------------------------------------------------------


def test_giou_identical_boxes():
    b = t([0.0, 0.0, 2.0, 3.0])
    assert float(giou_loss(b, t([0.0, 0.0, 2.0, 3.0])).data) == pytest.approx(0.0)


def test_giou_disjoint_hand_value():
    # enclosing box area 3, union 2, gap 1 -> loss = 1 - (0 - 1/3) = 4/3
    loss = giou_loss(t([0.0, 0.0, 1.0, 1.0]), t([2.0, 0.0, 3.0, 1.0]))
    assert float(loss.data) == pytest.approx(4.0 / 3.0, abs=1e-12)


def test_giou_decreases_as_boxes_approach():
    gt = t([0.0, 0.0, 2.0, 2.0])
    values = []
    for shift in np.linspace(6.0, 0.0, 13):
        pred = t([shift, 0.0, shift + 2.0, 2.0])
        values.append(float(giou_loss(pred, gt).data))
    assert all(a > b for a, b in zip(values, values[1:]))


# --- BCE ------------------------------------------------------------------------


def test_bce_logit_zero_label_one_is_ln2():
    assert float(bce_loss(t(0.0), t(1.0)).data) == pytest.approx(np.log(2.0), abs=1e-15)


def test_bce_confident_correct_is_tiny():
    assert float(bce_loss(t(20.0), t(1.0)).data) < 1e-8


def test_bce_gradient_is_sigmoid_minus_label():
    logit = t(0.7, grad=True)
    ad.backward(bce_loss(logit, t(1.0)))
    expected = 1.0 / (1.0 + np.exp(-0.7)) - 1.0
    assert float(logit.grad) == pytest.approx(expected, abs=1e-12)


# --- quality focal loss -----------------------------------------------------------


def test_qfl_zero_when_probability_matches_label():
    label = 0.3
    logit = np.log(label / (1 - label))
    assert float(quality_focal_loss(t(logit), t(label)).data) == pytest.approx(0.0, abs=1e-12)


def test_qfl_beta_zero_equals_soft_bce():
    rng = np.random.default_rng(5)
    for _ in range(50):
        logit, label = rng.normal(scale=2), rng.uniform(0, 1)
        q = float(quality_focal_loss(t(logit), t(label), beta=0.0).data)
        b = float(bce_loss(t(logit), t(label)).data)
        assert abs(q - b) < 1e-12


def test_qfl_nonnegative_and_zero_only_at_match():
    rng = np.random.default_rng(6)
    for _ in range(50):
        logit, label = rng.normal(scale=2), rng.uniform(0.05, 0.95)
        q = float(quality_focal_loss(t(logit), t(label)).data)
        assert q >= 0.0
        sig = 1.0 / (1.0 + np.exp(-logit))
        if abs(sig - label) > 1e-3:
            assert q > 0.0


def test_qfl_upweights_false_positives():
    # same logit, the larger label error gets the larger loss under beta=2
    confident_fp = float(quality_focal_loss(t(2.0), t(0.0)).data)
    mild_fp = float(quality_focal_loss(t(2.0), t(0.7)).data)
    assert confident_fp > mild_fp


# --- cyclic deformation loss ----------------------------------------------------


def test_cyclic_loss_matches_geometry_alignment():
    rng = np.random.default_rng(9)
    for _ in range(20):
        pred = rng.uniform(0, 40, (16, 2))
        target = pred + rng.normal(0, 3, (16, 2))
        loss, u = cyclic_deformation_loss(t(pred, grad=True), target)
        u_ref, loss_ref = G.cyclic_alignment(pred, target)
        assert u == u_ref
        assert float(loss.data) == loss_ref


def test_cyclic_loss_invariant_to_target_rotation():
    rng = np.random.default_rng(10)
    pred = t(rng.uniform(0, 40, (12, 2)), grad=True)
    target = pred.data + rng.normal(0, 2, (12, 2))
    base = float(cyclic_deformation_loss(pred, target)[0].data)
    for r in range(1, 12):
        rotated = np.roll(target, r, axis=0)
        assert abs(float(cyclic_deformation_loss(pred, rotated)[0].data) - base) < 1e-9


def test_cyclic_loss_zero_for_rotated_equal_rings():
    rng = np.random.default_rng(11)
    pred = t(rng.uniform(0, 20, (8, 2)), grad=True)
    loss, u = cyclic_deformation_loss(pred, np.roll(pred.data, 3, axis=0))
    assert float(loss.data) == 0.0 and u == 3


def test_cyclic_loss_gradient_follows_frozen_branch():
    rng = np.random.default_rng(12)
    pred = t(rng.uniform(0, 20, (8, 2)), grad=True)
    target = pred.data + rng.normal(0, 0.4, (8, 2))
    loss, u = cyclic_deformation_loss(pred, target)
    ad.backward(loss)
    # quadratic branch everywhere (|d| < 1): gradient is d / 2 per element
    aligned = target[(u + np.arange(8)) % 8]
    expected = (pred.data - aligned) * 0.5
    assert np.abs(pred.grad - expected).max() < 1e-12


def test_cyclic_loss_shape_mismatch():
    with pytest.raises(ValueError):
        cyclic_deformation_loss(t(np.zeros((8, 2))), np.zeros((6, 2)))
