"""Training: one-positive-per-instance allocation, initialization losses,
adaptive refinement batches with IoU re-score labels, and the Adam loop.

Discrete decisions made during a step (allocated cells, decoded candidate
contours, IoU matches, cyclic shifts) are captured in a TrainPlan. During
normal training the plan is rebuilt every step from detached values; the
finite-difference harness records one plan and replays it so the loss is a
smooth function of the parameters.
"""

from __future__ import annotations

import json
import math
import time
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .autodiff import (
    Adam,
    NumericalError,
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat,
    mul,
    reshape,
    tmean,
    tsum,
)
from .config import RunConfig
from .losses import (
    LossBreakdown,
    LossWeights,
    cyclic_deformation_loss,
    giou_loss,
    quality_focal_loss,
    smooth_l1,
)
from .model import (
    ContourDetector,
    Detection,
    InitHeadOutput,
    contour_box,
    decode_cell_box,
    sigmoid_np,
)
from .synth import Scene

log = logging.getLogger(__name__)

# Weight of each allocated positive cell in the classification loss,
# relative to a single negative cell's 1/N_cells. Uniform averaging leaves
# positives ~1000x too weak to clear the decode threshold in a short
# schedule, while per-positive normalization saturates whole instance
# interiors; a small constant boost keeps the map sharp.
POSITIVE_CLS_WEIGHT = 4.0


class TrainingDivergedError(NumericalError):
    """Loss or gradients went non-finite; carries the last good checkpoint."""

    def __init__(self, step: int, last_checkpoint, cause: str):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"training diverged at step {step} ({cause}); "
            f"last good checkpoint: {last_checkpoint or 'none'}")


# ---------------------------------------------------------------------------
# ground-truth targets


@dataclass
class InstanceTargets:
    polygon: np.ndarray        # normalized polygon, scene coordinates
    box: tuple                 # scene bounding box
    init_contour: np.ndarray   # coarse ring target (box samples snapped to boundary)
    final_contour: np.ndarray  # uniform arc-length ring on the boundary
    box_grid: tuple            # box / stride
    offsets_grid: np.ndarray   # (2*n,) offset regression target, grid units


def build_instance_targets(scene: Scene, n_vertices: int, stride: float) -> list[InstanceTargets]:
    out = []
    for poly in scene.polygons:
        poly = geometry.normalize_polygon(poly)
        box = geometry.polygon_bbox(poly)
        init_c = geometry.initial_contour_target(poly, n_vertices)
        final_c = geometry.uniform_contour_target(poly, n_vertices)
        box_grid = tuple(v / stride for v in box)
        samples = geometry.box_perimeter_sample(box_grid, n_vertices)
        offsets = (init_c / stride - samples).reshape(-1)
        out.append(InstanceTargets(
            polygon=poly, box=box, init_contour=init_c, final_contour=final_c,
            box_grid=box_grid, offsets_grid=offsets,
        ))
    return out


# ---------------------------------------------------------------------------
# refinement samples and the step plan


@dataclass
class RefinementSample:
    source: str                           # "ground_truth" | "predicted"
    contour: np.ndarray                   # input ring, scene coordinates
    regression_target: np.ndarray | None  # None for false positives
    score_label: float


@dataclass
class TrainPlan:
    """Frozen discrete structure of one training step."""

    positive_cells: list = field(default_factory=list)    # one (r, c) per instance
    stage_samples: list = field(default_factory=list)     # per stage: list[RefinementSample]
    stage_shifts: list = field(default_factory=list)      # per stage: list[int | None]


def _np_bce_positive(logit: float) -> float:
    # -log sigmoid(logit), stable
    return float(np.maximum(-logit, 0.0) + np.log1p(np.exp(-abs(logit))))


def _np_giou_loss(pred, gt) -> float:
    px0, py0, px1, py1 = pred
    gx0, gy0, gx1, gy1 = gt
    iw = max(0.0, min(px1, gx1) - max(px0, gx0))
    ih = max(0.0, min(py1, gy1) - max(py0, gy0))
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    iou = inter / union
    ew = max(px1, gx1) - min(px0, gx0)
    eh = max(py1, gy1) - min(py0, gy0)
    enclosing = ew * eh
    return 1.0 - (iou - (enclosing - union) / enclosing)


def allocate_positive(head: InitHeadOutput, targets: list[InstanceTargets],
                      weights: LossWeights) -> list[tuple[int, int]]:
    """Pick the single cell per instance minimizing classification + box +
    offset loss, among cells whose centers fall inside the instance box.

    Cells already claimed by an earlier instance are excluded so every
    instance gets a distinct positive. Ties resolve to the lowest row-major
    index; an instance whose box covers no cell center falls back to the
    nearest free cell.
    """
    cls = head.cls_map.data[0]
    box_data = head.box_map.data
    off_data = head.offset_map.data
    h, w = cls.shape
    taken: set[tuple[int, int]] = set()
    cells: list[tuple[int, int]] = []
    for t in targets:
        gx0, gy0, gx1, gy1 = t.box_grid
        r0 = max(0, math.ceil(gy0 - 0.5))
        r1 = min(h - 1, math.floor(gy1 - 0.5))
        c0 = max(0, math.ceil(gx0 - 0.5))
        c1 = min(w - 1, math.floor(gx1 - 0.5))
        candidates = [
            (r, c)
            for r in range(r0, r1 + 1)
            for c in range(c0, c1 + 1)
            if (r, c) not in taken
        ]
        if not candidates:
            log.warning("instance box %s covers no free cell center; using nearest cell", t.box)
            bx, by = (gx0 + gx1) / 2, (gy0 + gy1) / 2
            free = [(r, c) for r in range(h) for c in range(w) if (r, c) not in taken]
            best = min(free, key=lambda rc: ((rc[1] + 0.5 - bx) ** 2 + (rc[0] + 0.5 - by) ** 2))
            taken.add(best)
            cells.append(best)
            continue
        best, best_cost = None, math.inf
        for r, c in candidates:  # row-major order; strict < keeps the lowest index
            cost = _np_bce_positive(float(cls[r, c]))
            cost += weights.box * _np_giou_loss(decode_cell_box(box_data, r, c), t.box_grid)
            diff = off_data[:, r, c].astype(np.float64) - t.offsets_grid
            cost += weights.off1 * float(geometry.huber(diff).mean())
            if cost < best_cost:
                best, best_cost = (r, c), cost
        if best is None:  # non-finite maps; keep going so the loss check reports it
            best = candidates[0]
        taken.add(best)
        cells.append(best)
    return cells


def build_refinement_batch(preds: list[Detection], targets: list[InstanceTargets],
                           adaptive: bool = True) -> list[RefinementSample]:
    """Ground-truth-sourced samples (one per instance, label 1) plus, under
    the adaptive strategy, one predicted-sourced sample per decoded
    detection labeled with its best box IoU. False positives (IoU < 0.5)
    keep their label but get no regression target."""
    samples = [
        RefinementSample("ground_truth", t.init_contour, t.final_contour, 1.0)
        for t in targets
    ]
    if adaptive:
        gt_boxes = [t.box for t in targets]
        for d in preds:
            m = geometry.match_to_ground_truth(d.box, gt_boxes)
            target = None if m.is_false_positive else targets[m.gt_index].final_contour
            samples.append(RefinementSample("predicted", d.contour, target, m.best_iou))
    return samples


# ---------------------------------------------------------------------------
# loss assembly


def _mean_terms(terms: list[Tensor], dtype) -> Tensor:
    if not terms:
        return Tensor(np.zeros((), dtype=dtype))
    if len(terms) == 1:
        return terms[0]
    return tmean(concat([reshape(t, (1,)) for t in terms], axis=0))


def init_loss(head: InitHeadOutput, targets: list[InstanceTargets],
              cells: list[tuple[int, int]], weights: LossWeights,
              dtype) -> tuple[Tensor, Tensor, Tensor]:
    """(l_cls, l_box, l_off1): classification over every cell (allocated
    positives vs all other cells), box and offset regression at positives.

    The negative-cell cross-entropy is averaged over the full cell count;
    positive cells get the same normalizer times POSITIVE_CLS_WEIGHT."""
    h, w = head.cls_map.shape[1:]
    labels = np.zeros((1, h, w), dtype=dtype)
    pos_mask = np.zeros((1, h, w), dtype=dtype)
    for r, c in cells:
        labels[0, r, c] = 1.0
        pos_mask[0, r, c] = 1.0
    per_cell = bce_with_logits(head.cls_map, labels)
    l_cls = tsum(mul(per_cell, 1.0 - pos_mask)) / float(h * w)
    if cells:
        l_cls = add(l_cls, tsum(mul(per_cell, pos_mask)) * (POSITIVE_CLS_WEIGHT / (h * w)))
    box_terms, off_terms = [], []
    for t, (r, c) in zip(targets, cells):
        d = head.box_map[:, r, c]
        cx, cy = c + 0.5, r + 0.5
        pred_box = concat([
            cx - d[0:1], cy - d[1:2], cx + d[2:3], cy + d[3:4],
        ])
        box_terms.append(giou_loss(pred_box, np.asarray(t.box_grid, dtype=dtype)))
        off_terms.append(smooth_l1(head.offset_map[:, r, c],
                                   t.offsets_grid.astype(dtype)))
    return l_cls, _mean_terms(box_terms, dtype), _mean_terms(off_terms, dtype)


def transform_loss(model: ContourDetector, fm, samples: list[RefinementSample],
                   stage: int, beta: float, train: bool,
                   shifts: list | None = None):
    """One refinement stage: deformation loss over samples with targets
    (cyclic smooth-L1 at the selected shift) and re-score loss over all
    samples. Returns (l_off2, l_rescore, shifts, refined contours, scores)."""
    dtype = model.dtype
    off2_terms, qfl_terms = [], []
    used_shifts: list = []
    refined_contours: list[np.ndarray] = []
    scores: list[float] = []
    for i, s in enumerate(samples):
        out = model.contour_transformer_forward(fm, s.contour, stage, train=train)
        refined = add(mul(out.offsets, model.stride), s.contour.astype(dtype))
        refined_contours.append(refined.data.astype(np.float64))
        scores.append(float(sigmoid_np(out.score_logit.data)))
        if s.regression_target is not None:
            shift = None if shifts is None else shifts[i]
            loss, u = cyclic_deformation_loss(refined, s.regression_target, shift)
            off2_terms.append(loss)
            used_shifts.append(u)
        else:
            used_shifts.append(None)
        qfl_terms.append(quality_focal_loss(
            out.score_logit, np.asarray(s.score_label, dtype=dtype), beta))
    l_off2 = _mean_terms(off2_terms, dtype)
    l_rescore = _mean_terms(qfl_terms, dtype)
    return l_off2, l_rescore, used_shifts, refined_contours, scores


def training_losses(model: ContourDetector, scene: Scene,
                    targets: list[InstanceTargets] | None = None,
                    plan: TrainPlan | None = None,
                    train: bool = True) -> tuple[dict, LossBreakdown, TrainPlan]:
    """Full composite loss for one scene.

    Returns ({name: scalar Tensor}, LossBreakdown, TrainPlan). Passing a
    recorded plan replays its discrete decisions, making the loss smooth in
    the parameters (used by gradient checks); otherwise decisions are made
    fresh from detached values and recorded.
    """
    cfg = model.config
    dtype = model.dtype
    weights = LossWeights(cfg.lambda_box, cfg.lambda_off1, cfg.lambda_off2, cfg.lambda_rescore)
    if targets is None:
        targets = build_instance_targets(scene, cfg.n_vertices, model.stride)
    replay = plan is not None
    if not replay:
        plan = TrainPlan()

    fm = model.backbone_forward(scene.raster[0:cfg.in_channels])
    head = model.init_head_forward(fm)
    if not np.all(np.isfinite(head.cls_map.data)):
        # a NaN/Inf burst upstream; report it as a non-finite loss rather
        # than letting geometry code trip over NaN coordinates
        nan = Tensor(np.full((), np.nan, dtype=dtype))
        names = ("l_cls", "l_box", "l_off1", "l_off2", "l_rescore",
                 "l_init", "l_transform", "total")
        return ({k: nan for k in names},
                LossBreakdown(**{k: float("nan") for k in names}), plan)

    if not replay:
        plan.positive_cells = allocate_positive(head, targets, weights) if targets else []
    l_cls, l_box, l_off1 = init_loss(head, targets, plan.positive_cells, weights, dtype)

    stage_off2: list[Tensor] = []
    stage_rescore: list[Tensor] = []
    if cfg.stages > 0:
        if not replay:
            preds = model.decode_initial_contours(
                head, cfg.tau_a, max_detections=cfg.max_train_detections)
            plan.stage_samples.append(
                build_refinement_batch(preds, targets, cfg.adaptive_training))
            plan.stage_shifts = [None] * cfg.stages
        for k in range(cfg.stages):
            samples = plan.stage_samples[k]
            shifts = plan.stage_shifts[k] if replay else None
            l_off2, l_rescore, used_shifts, refined, scores = transform_loss(
                model, fm, samples, k, cfg.qfl_beta, train, shifts)
            stage_off2.append(l_off2)
            stage_rescore.append(l_rescore)
            if not replay:
                plan.stage_shifts[k] = used_shifts
                if k + 1 < cfg.stages:
                    carried = [
                        Detection(contour=rc, score=sc, stage=k + 1, box=contour_box(rc))
                        for s, rc, sc in zip(samples, refined, scores)
                        if s.source == "predicted"
                    ]
                    plan.stage_samples.append(
                        build_refinement_batch(carried, targets, cfg.adaptive_training))

    zero = Tensor(np.zeros((), dtype=dtype))
    l_off2_total = zero
    l_rescore_total = zero
    for t in stage_off2:
        l_off2_total = add(l_off2_total, t)
    for t in stage_rescore:
        l_rescore_total = add(l_rescore_total, t)
    if not cfg.rescore:
        l_rescore_total = zero

    l_init = add(add(l_cls, mul(l_box, weights.box)), mul(l_off1, weights.off1))
    l_transform = add(mul(l_off2_total, weights.off2), mul(l_rescore_total, weights.rescore))
    total = add(l_init, l_transform)

    tensors = {
        "l_cls": l_cls, "l_box": l_box, "l_off1": l_off1,
        "l_off2": l_off2_total, "l_rescore": l_rescore_total,
        "l_init": l_init, "l_transform": l_transform, "total": total,
    }
    breakdown = LossBreakdown(**{k: float(v.data) for k, v in tensors.items()})
    return tensors, breakdown, plan


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    model: ContourDetector
    metrics: list
    checkpoint_path: str | None


def train_loop(scenes: list[Scene], config: RunConfig, out_dir=None,
               resume_from=None, progress: bool = False) -> TrainResult:
    """Deterministic single-scene-per-step Adam training.

    Writes `metrics.ndjson` (one record per step) and periodic checkpoints
    under `out_dir` when given. Aborts with TrainingDivergedError on a
    non-finite loss or gradient, referencing the last good checkpoint.
    """
    if not scenes:
        raise ValueError("train_loop needs at least one scene")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_step = 0
    model = ContourDetector(config)
    opt = Adam(model.parameters(), lr=config.lr)
    if resume_from is not None:
        from .autodiff import load_checkpoint

        ckpt = load_checkpoint(resume_from)
        stored = RunConfig.from_dict(ckpt.config)
        if stored.replace(steps=config.steps) != config:
            raise ValueError("checkpoint config does not match the requested config")
        model.load_arrays(ckpt.params())
        if ckpt.optimizer_meta is not None:
            opt.load_state_arrays(ckpt.optimizer_arrays(), ckpt.optimizer_meta["t"])
        start_step = ckpt.step

    targets_cache = [build_instance_targets(s, config.n_vertices, model.stride) for s in scenes]
    order_rng = np.random.default_rng([config.seed, 303])
    # replay epoch shuffles consumed before the resume point
    perm = None
    for step0 in range(start_step):
        if step0 % len(scenes) == 0:
            perm = order_rng.permutation(len(scenes))

    metrics: list[dict] = []
    metrics_file = open(out / "metrics.ndjson", "a", encoding="utf-8") if out else None
    last_ckpt: str | None = None
    started = time.perf_counter()
    try:
        for step in range(start_step + 1, config.steps + 1):
            idx = step - 1
            if idx % len(scenes) == 0:
                perm = order_rng.permutation(len(scenes))
            scene_i = int(perm[idx % len(scenes)])
            lr = config.lr * (config.lr_decay if step > config.lr_decay_step else 1.0)
            opt.lr = lr
            opt.zero_grad()
            tensors, breakdown, _ = training_losses(
                model, scenes[scene_i], targets_cache[scene_i], train=True)
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(step, last_ckpt, "non-finite loss")
            backward(tensors["total"])
            try:
                opt.step()
            except NumericalError as exc:
                raise TrainingDivergedError(step, last_ckpt, str(exc)) from exc

            record = {"step": step, "lr": lr, "seed": config.seed, **breakdown.to_dict()}
            metrics.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
            if progress and (step % 100 == 0 or step == config.steps):
                rate = (time.perf_counter() - started) / max(1, step - start_step)
                log.info("step %d/%d total=%.4f (%.2fs/step)",
                         step, config.steps, breakdown.total, rate)
            if out is not None and (step % config.checkpoint_every == 0 or step == config.steps):
                path = out / f"checkpoint_{step:06d}.bin"
                model.save(path, step=step, optimizer=opt)
                last_ckpt = str(path)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    final_path = None
    if out is not None:
        final_path = str(out / "checkpoint_final.bin")
        model.save(final_path, step=config.steps, optimizer=opt)
    return TrainResult(model=model, metrics=metrics, checkpoint_path=final_path)
