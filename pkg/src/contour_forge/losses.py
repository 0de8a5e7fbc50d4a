"""Differentiable loss terms for initialization and refinement training.

All functions build autodiff graphs; constants (targets, labels) may be
plain arrays. The cyclic deformation loss mirrors geometry.cyclic_alignment
exactly: the discrete shift is selected on detached values and held fixed
on the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .autodiff import (
    Tensor,
    as_tensor,
    bce_with_logits,
    concat,
    huber,
    maximum,
    minimum,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    smooth_l1,
    sub,
    tabs,
    tmean,
    tsum,
)

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "smooth_l1",
    "giou_loss",
    "bce_loss",
    "quality_focal_loss",
    "cyclic_deformation_loss",
]


@dataclass
class LossWeights:
    """Trade-off weights: box regression, initial offsets, deformation,
    re-score (in that order)."""

    box: float = 1.0
    off1: float = 1.0
    off2: float = 0.1
    rescore: float = 2.0


@dataclass
class LossBreakdown:
    """Scalar values of every loss term for one step, as logged."""

    l_cls: float = 0.0
    l_box: float = 0.0
    l_off1: float = 0.0
    l_off2: float = 0.0
    l_rescore: float = 0.0
    l_init: float = 0.0
    l_transform: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def giou_loss(pred, gt) -> Tensor:
    """1 - GIoU for (x_min, y_min, x_max, y_max) boxes; range [0, 2)."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    lt = maximum(pred[0:2], gt[0:2])
    rb = minimum(pred[2:4], gt[2:4])
    wh = relu(sub(rb, lt))
    inter = mul(wh[0:1], wh[1:2])
    area_p = mul(sub(pred[2:3], pred[0:1]), sub(pred[3:4], pred[1:2]))
    area_g = mul(sub(gt[2:3], gt[0:1]), sub(gt[3:4], gt[1:2]))
    union = sub(area_p + area_g, inter)
    iou = inter / union
    elt = minimum(pred[0:2], gt[0:2])
    erb = maximum(pred[2:4], gt[2:4])
    ewh = sub(erb, elt)
    enclosing = mul(ewh[0:1], ewh[1:2])
    giou = sub(iou, sub(enclosing, union) / enclosing)
    return reshape(sub(1.0, giou), ())


def bce_loss(logit, label) -> Tensor:
    """Mean binary cross-entropy on logits (numerically stabilized)."""
    return tmean(bce_with_logits(logit, label))


def quality_focal_loss(logit, soft_label, beta: float = 2.0) -> Tensor:
    """Soft-label BCE modulated by |label - sigmoid(logit)|^beta.

    beta = 0 reduces exactly to the plain soft-label cross-entropy.
    """
    logit, soft_label = as_tensor(logit), as_tensor(soft_label)
    modulator = power(tabs(sub(soft_label, sigmoid(logit))), beta)
    return tmean(mul(modulator, bce_with_logits(logit, soft_label)))


def cyclic_deformation_loss(pred: Tensor, target: np.ndarray,
                            shift: int | None = None) -> tuple[Tensor, int]:
    """Ring deformation loss minimized over cyclic rotations of the target.

    Per-vertex smooth-L1 (averaged over x/y) summed around the ring, at the
    best shift. The shift is chosen on detached values (or passed in) and
    treated as a constant of the forward pass, so gradients follow the
    selected branch only. Returns (loss tensor, shift).
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"contour shape mismatch: {pred.shape} vs {target.shape}")
    n = target.shape[0]
    if shift is None:
        shift, _ = geometry.cyclic_alignment(pred.data, target)
    aligned = target[(shift + np.arange(n)) % n]
    loss = tsum(tmean(huber(sub(pred, aligned)), axis=1))
    return loss, shift
