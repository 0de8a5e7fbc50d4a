"""The learnable stack: feature extractor, contour initialization head, and
the per-stage contour refinement transformers.

Coordinates: rasters and contours live in scene pixels; the feature map is
stride-4, and token sampling converts scene coordinates to lattice
coordinates as scene/stride - 0.5 (so a scene point at a cell center lands
exactly on that cell's lattice node). Regressed offsets are in feature-grid
units and are scaled by the stride when applied to a contour.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import geometry
from .autodiff import (
    Adam,
    Tensor,
    add,
    bilinear_sample,
    concat,
    conv2d,
    dropout,
    gelu,
    layer_norm,
    linear,
    load_checkpoint,
    matmul,
    max_pool_2x2,
    mul,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax,
    softplus,
    transpose,
)
from .config import ConfigError, RunConfig

FEATURE_STRIDE = 4
# Floor added to regressed box extents so decoded boxes are never degenerate.
BOX_DISTANCE_FLOOR = 1e-3


def sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class FeatureMap:
    tensor: Tensor  # [C, H, W]
    stride: float

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]

    @property
    def height(self) -> int:
        return self.tensor.shape[1]

    @property
    def width(self) -> int:
        return self.tensor.shape[2]


@dataclass
class InitHeadOutput:
    cls_map: Tensor     # [1, H, W] logits
    box_map: Tensor     # [4, H, W] nonnegative distances (left, top, right, bottom)
    offset_map: Tensor  # [2*n_vertices, H, W] per-vertex (dx, dy) pairs


@dataclass
class RefinementOutput:
    offsets: Tensor      # [n_vertices, 2], feature-grid units
    score_logit: Tensor  # scalar


@dataclass
class Detection:
    contour: np.ndarray  # (n_vertices, 2), scene coordinates
    score: float
    stage: int
    box: tuple[float, float, float, float]
    index: int = 0
    cell: tuple[int, int] | None = None
    history: list = field(default_factory=list)  # [(contour, score)] per stage


@dataclass
class InferenceResult:
    detections: list       # final detections (score >= tau_b)
    all_detections: list   # every decoded detection after its last stage
    refine_calls: list     # refinement invocations per stage


def contour_box(contour: np.ndarray) -> tuple[float, float, float, float]:
    return (
        float(contour[:, 0].min()),
        float(contour[:, 1].min()),
        float(contour[:, 0].max()),
        float(contour[:, 1].max()),
    )


def decode_cell_box(box_data: np.ndarray, r: int, c: int) -> tuple[float, float, float, float]:
    """Grid-space box at cell (r, c) from a [4, H, W] distance map:
    distances run from the cell center to the left/top/right/bottom sides."""
    left, top, right, bottom = (float(v) for v in box_data[:, r, c])
    cx, cy = c + 0.5, r + 0.5
    return (cx - left, cy - top, cx + right, cy + bottom)


class ContourDetector:
    """Backbone + initialization head + `stages` refinement transformers."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.stride = float(FEATURE_STRIDE)
        self.dtype = np.float32 if config.train_dtype == "float32" else np.float64
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng([config.seed, 101])
        self.dropout_rng = np.random.default_rng([config.seed, 202])
        self._build()

    # -- parameter construction -----------------------------------------

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _normal(self, name: str, shape, std: float) -> Tensor:
        return self._param(name, self._rng.normal(0.0, std, shape))

    def _zeros(self, name: str, shape) -> Tensor:
        return self._param(name, np.zeros(shape))

    def _const(self, name: str, shape, value) -> Tensor:
        return self._param(name, np.full(shape, value, dtype=np.float64))

    def _conv(self, name: str, c_in: int, c_out: int, k: int) -> SimpleNamespace:
        std = np.sqrt(2.0 / (c_in * k * k))
        return SimpleNamespace(
            w=self._normal(f"{name}/w", (c_out, c_in, k, k), std),
            b=self._zeros(f"{name}/b", (c_out,)),
        )

    def _linear(self, name: str, d_in: int, d_out: int, std: float | None = None) -> SimpleNamespace:
        std = np.sqrt(1.0 / d_in) if std is None else std
        return SimpleNamespace(
            w=self._normal(f"{name}/w", (d_in, d_out), std),
            b=self._zeros(f"{name}/b", (d_out,)),
        )

    def _ln(self, name: str, dim: int) -> SimpleNamespace:
        return SimpleNamespace(
            g=self._const(f"{name}/g", (dim,), 1.0),
            b=self._zeros(f"{name}/b", (dim,)),
        )

    def _build(self) -> None:
        cfg = self.config
        c = cfg.channels
        na = cfg.n_vertices

        self.bb = SimpleNamespace(
            conv1=self._conv("backbone/conv1", cfg.in_channels, 16, 3),
            conv2=self._conv("backbone/conv2", 16, 32, 3),
            conv3=self._conv("backbone/conv3", 32, c, 3),
            conv4=self._conv("backbone/conv4", c, c, 3),
        )

        head_convs = [self._conv(f"init_head/conv{i}", c, c, 3) for i in (1, 2, 3)]
        out_channels = 1 + 4 + 2 * na
        out_w = self._rng.normal(0.0, 0.01, (out_channels, c, 1, 1))
        out_b = np.zeros(out_channels)
        out_b[0] = -np.log(9.0)  # start positions near sigmoid 0.1
        out_b[1:5] = 1.0         # start box extents at softplus(1) grid units
        self.init_head = SimpleNamespace(
            convs=head_convs,
            out=SimpleNamespace(
                w=self._param("init_head/out/w", out_w),
                b=self._param("init_head/out/b", out_b),
            ),
        )

        self.stage_params = [self._build_stage(k) for k in range(cfg.stages)]

    def _build_stage(self, k: int) -> SimpleNamespace:
        cfg = self.config
        c = cfg.channels
        pre = f"stage{k}"
        layers = []
        for i in range(cfg.encoder_layers):
            lp = f"{pre}/enc{i}"
            layers.append(SimpleNamespace(
                ln1=self._ln(f"{lp}/ln1", c),
                wq=self._linear(f"{lp}/q", c, c),
                wk=self._linear(f"{lp}/k", c, c),
                wv=self._linear(f"{lp}/v", c, c),
                wo=self._linear(f"{lp}/o", c, c),
                ln2=self._ln(f"{lp}/ln2", c),
                mlp1=self._linear(f"{lp}/mlp1", c, c),
                mlp2=self._linear(f"{lp}/mlp2", c, c),
            ))
        return SimpleNamespace(
            x_cls=self._normal(f"{pre}/x_cls", (1, c), 0.02),
            layers=layers,
            reg=self._build_head(f"{pre}/reg", out_dim=2, final_std=0.01),
            cls=self._build_head(f"{pre}/cls", out_dim=1, final_std=0.01),
        )

    def _build_head(self, name: str, out_dim: int, final_std: float) -> SimpleNamespace:
        c = self.config.channels
        return SimpleNamespace(
            fc1=self._linear(f"{name}/fc1", c, c, std=np.sqrt(2.0 / c)),
            ln1=self._ln(f"{name}/ln1", c),
            fc2=self._linear(f"{name}/fc2", c, c, std=np.sqrt(2.0 / c)),
            ln2=self._ln(f"{name}/ln2", c),
            fc3=self._linear(f"{name}/fc3", c, out_dim, std=final_std),
        )

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- forward passes ---------------------------------------------------

    def backbone_forward(self, raster: np.ndarray) -> FeatureMap:
        """[C_in, H, W] scene raster -> stride-4 feature map with C channels."""
        x = Tensor(np.asarray(raster, dtype=self.dtype))
        x = relu(conv2d(x, self.bb.conv1.w, self.bb.conv1.b, padding=1))
        x = max_pool_2x2(x)
        x = relu(conv2d(x, self.bb.conv2.w, self.bb.conv2.b, padding=1))
        x = max_pool_2x2(x)
        x = relu(conv2d(x, self.bb.conv3.w, self.bb.conv3.b, padding=1))
        x = relu(conv2d(x, self.bb.conv4.w, self.bb.conv4.b, padding=1))
        return FeatureMap(tensor=x, stride=self.stride)

    def init_head_forward(self, fm: FeatureMap) -> InitHeadOutput:
        """Three 3x3 conv+relu blocks, then one 1x1 conv split into the
        position / box / per-vertex-offset maps."""
        x = fm.tensor
        for conv in self.init_head.convs:
            x = relu(conv2d(x, conv.w, conv.b, padding=1))
        raw = conv2d(x, self.init_head.out.w, self.init_head.out.b)
        na = self.config.n_vertices
        cls_map = raw[0:1]
        box_map = add(softplus(raw[1:5]), BOX_DISTANCE_FLOOR)
        offset_map = raw[5 : 5 + 2 * na]
        return InitHeadOutput(cls_map=cls_map, box_map=box_map, offset_map=offset_map)

    def decode_initial_contours(self, out: InitHeadOutput, tau_a: float | None = None,
                                max_detections: int | None = None) -> list[Detection]:
        """Threshold the position map, decode a box per firing cell, sample
        its perimeter, and add the per-vertex offsets. No NMS.

        Candidates are ordered by descending score (ties: row-major index)
        and optionally capped at `max_detections`.
        """
        cfg = self.config
        tau_a = cfg.tau_a if tau_a is None else tau_a
        scores = sigmoid_np(out.cls_map.data[0])
        h, w = scores.shape
        flat = scores.ravel()
        hits = np.flatnonzero(flat > tau_a)
        if hits.size == 0:
            return []
        order = hits[np.argsort(-flat[hits], kind="stable")]
        if max_detections is not None:
            order = order[:max_detections]
        box_data = out.box_map.data
        off_data = out.offset_map.data
        na = cfg.n_vertices
        dets = []
        for i, pos in enumerate(order):
            r, c = divmod(int(pos), w)
            box_grid = decode_cell_box(box_data, r, c)
            samples = geometry.box_perimeter_sample(box_grid, na)
            offs = off_data[:, r, c].astype(np.float64).reshape(na, 2)
            contour = (samples + offs) * self.stride
            score = float(flat[pos])
            dets.append(Detection(
                contour=contour,
                score=score,
                stage=0,
                box=tuple(v * self.stride for v in box_grid),
                index=i,
                cell=(r, c),
                history=[(contour.copy(), score)],
            ))
        return dets

    def sample_vertex_tokens(self, fm: FeatureMap, contour: np.ndarray, x_cls: Tensor) -> Tensor:
        """One bilinear token per vertex plus the learnable scoring token."""
        coords = np.asarray(contour, dtype=np.float64) / fm.stride - 0.5
        tokens = bilinear_sample(fm.tensor, coords)
        return concat([tokens, x_cls], axis=0)

    def encoder_layer(self, z: Tensor, lw: SimpleNamespace) -> Tensor:
        """Pre-norm transformer encoder layer: self-attention then MLP,
        each with a residual connection."""
        cfg = self.config
        heads = cfg.heads
        dh = cfg.channels // heads
        scale = 1.0 / np.sqrt(dh)

        h = self._affine_ln(z, lw.ln1)
        q = linear(h, lw.wq.w, lw.wq.b)
        k = linear(h, lw.wk.w, lw.wk.b)
        v = linear(h, lw.wv.w, lw.wv.b)
        outs = []
        for i in range(heads):
            sl = slice(i * dh, (i + 1) * dh)
            att = softmax(mul(matmul(q[:, sl], transpose(k[:, sl])), scale), axis=-1)
            outs.append(matmul(att, v[:, sl]))
        attn = linear(concat(outs, axis=1), lw.wo.w, lw.wo.b)
        z = add(z, attn)

        h2 = self._affine_ln(z, lw.ln2)
        mlp = linear(gelu(linear(h2, lw.mlp1.w, lw.mlp1.b)), lw.mlp2.w, lw.mlp2.b)
        return add(z, mlp)

    def _affine_ln(self, x: Tensor, ln: SimpleNamespace) -> Tensor:
        return add(mul(layer_norm(x, axis=-1), ln.g), ln.b)

    def _head_forward(self, x: Tensor, head: SimpleNamespace, train: bool) -> Tensor:
        p = self.config.dropout
        h = relu(linear(x, head.fc1.w, head.fc1.b))
        h = dropout(self._affine_ln(h, head.ln1), p, train, self.dropout_rng)
        h = relu(linear(h, head.fc2.w, head.fc2.b))
        h = dropout(self._affine_ln(h, head.ln2), p, train, self.dropout_rng)
        return linear(h, head.fc3.w, head.fc3.b)

    def contour_transformer_forward(self, fm: FeatureMap, contour: np.ndarray,
                                    stage: int, train: bool = False) -> RefinementOutput:
        """Run one refinement module: encoder stack, then the per-vertex
        regression head and the scoring head on the classification token."""
        sp = self.stage_params[stage]
        na = self.config.n_vertices
        z = self.sample_vertex_tokens(fm, contour, sp.x_cls)
        for lw in sp.layers:
            z = self.encoder_layer(z, lw)
        offsets = self._head_forward(z[0:na, :], sp.reg, train)
        score_logit = reshape(self._head_forward(z[na : na + 1, :], sp.cls, train), ())
        return RefinementOutput(offsets=offsets, score_logit=score_logit)

    def refine(self, det: Detection, out: RefinementOutput,
               replace_score: bool = True) -> Detection:
        """Apply regressed offsets (scaled to scene units) and the new score;
        the matching box is recomputed from the refined vertices."""
        contour = det.contour + out.offsets.data.astype(np.float64) * self.stride
        score = float(sigmoid_np(out.score_logit.data)) if replace_score else det.score
        return Detection(
            contour=contour,
            score=score,
            stage=det.stage + 1,
            box=contour_box(contour),
            index=det.index,
            cell=det.cell,
            history=det.history + [(contour.copy(), score)],
        )

    # -- inference --------------------------------------------------------

    def run_refinement(self, fm: FeatureMap, tau_a: float | None = None,
                       tau_b: float | None = None, stages: int | None = None,
                       use_rescore: bool | None = None,
                       max_detections: int | None = None) -> InferenceResult:
        """Decode initial contours and refine them stage by stage.

        With re-scoring active, a detection whose score reaches tau_b after
        a stage is frozen and skips the remaining stages; the final output
        drops detections scoring below tau_b.
        """
        cfg = self.config
        tau_a = cfg.tau_a if tau_a is None else tau_a
        tau_b = cfg.tau_b if tau_b is None else tau_b
        stages = cfg.stages if stages is None else stages
        use_rescore = cfg.rescore if use_rescore is None else use_rescore
        max_detections = cfg.max_detections if max_detections is None else max_detections
        if stages > len(self.stage_params):
            raise ConfigError(
                f"requested {stages} stages but the model has {len(self.stage_params)}")

        head = self.init_head_forward(fm)
        dets = self.decode_initial_contours(head, tau_a, max_detections)
        refine_calls = [0] * stages
        active = list(range(len(dets)))
        for k in range(stages):
            still_active = []
            for i in active:
                out = self.contour_transformer_forward(fm, dets[i].contour, k, train=False)
                refine_calls[k] += 1
                dets[i] = self.refine(dets[i], out, replace_score=use_rescore)
                if not (use_rescore and dets[i].score >= tau_b):
                    still_active.append(i)
            active = still_active
        final = [d for d in dets if d.score >= tau_b]
        return InferenceResult(detections=final, all_detections=dets, refine_calls=refine_calls)

    def multi_stage_inference(self, fm: FeatureMap, tau_a: float | None = None,
                              tau_b: float | None = None,
                              stages: int | None = None) -> list:
        return self.run_refinement(fm, tau_a, tau_b, stages).detections

    def detect(self, raster: np.ndarray, **kwargs) -> InferenceResult:
        return self.run_refinement(self.backbone_forward(raster), **kwargs)

    # -- persistence --------------------------------------------------------

    def save(self, path, step: int = 0, optimizer: Adam | None = None) -> None:
        save_checkpoint(path, self.params, self.config.to_dict(), step, optimizer)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:5]} ...")
        for name, p in self.params.items():
            p.data = arrays[name].astype(self.dtype).reshape(p.data.shape)

    @classmethod
    def from_checkpoint(cls, path) -> tuple["ContourDetector", "RunConfig", int]:
        ckpt = load_checkpoint(path)
        config = RunConfig.from_dict(ckpt.config)
        model = cls(config)
        model.load_arrays(ckpt.params())
        return model, config, ckpt.step
