"""Minimal reverse-mode differentiation over dense numpy tensors.

Each op records its parents and a vector-Jacobian closure on the output
tensor; `backward` topologically sorts the ops reachable from a scalar
loss (the tape) and visits each exactly once, accumulating gradients into
`.grad` on every tensor that requires them. Tensors are float64 by default
(tests run in 64-bit); float32 data is kept as float32 for training speed.

Also home to the Adam optimizer and the binary checkpoint format, since
both operate directly on parameter tensors.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericalError(RuntimeError):
    """Raised when a NaN/Inf gradient or loss makes an update unsafe."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    # shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    # reductions / elementwise ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def sqrt(self):
        return tsqrt(self)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Topologically ordered record of ops reachable from a root tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.nodes = order  # parents before children


def backward(loss: Tensor) -> None:
    """Populate `.grad` for every requires_grad tensor feeding the loss."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _result(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    data = a.data @ b.data
    return _result(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(orig),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, ts, vjp)


def take(a, idx) -> Tensor:
    """Basic or advanced indexing with scatter-add backward."""
    a = as_tensor(a)
    data = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _result(data, (a,), vjp)


def _keep_shape(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if keepdims or axis is None:
        return g
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = _keep_shape(np.asarray(g), a.shape, axis, keepdims)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )

    def vjp(g):
        g = _keep_shape(np.asarray(g), a.shape, axis, keepdims)
        return (np.broadcast_to(g, a.shape) / count,)

    return _result(data, (a,), vjp)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        full = _keep_shape(np.asarray(g), a.shape, axis, keepdims)
        maxed = _keep_shape(np.atleast_1d(data) if axis is None else data, a.shape, axis, keepdims)
        mask = a.data == maxed
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        return (np.where(mask, full / counts, 0.0),)

    return _result(data, (a,), vjp)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)

    def vjp(g):
        wa = np.where(a.data > b.data, 1.0, np.where(a.data == b.data, 0.5, 0.0))
        return (_unbroadcast(g * wa, a.shape), _unbroadcast(g * (1.0 - wa), b.shape))

    return _result(data, (a, b), vjp)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.minimum(a.data, b.data)

    def vjp(g):
        wa = np.where(a.data < b.data, 1.0, np.where(a.data == b.data, 0.5, 0.0))
        return (_unbroadcast(g * wa, a.shape), _unbroadcast(g * (1.0 - wa), b.shape))

    return _result(data, (a, b), vjp)


def texp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _result(data, (a,), lambda g: (g * 0.5 / data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a, p: float) -> Tensor:
    """a ** p for a constant exponent."""
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def vjp(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        return (g * p * a.data ** (p - 1.0),)

    return _result(data, (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _result(data, (a,), lambda g: (g * (a.data > 0),))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _result(data, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = as_tensor(a)
    x = a.data

    def vjp(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * s,)

    return _result(_softplus(x), (a,), vjp)


def bce_with_logits(logit, label) -> Tensor:
    """Numerically stable elementwise binary cross-entropy on logits.

    Supports soft labels in [0, 1]; gradient to the logit is sigmoid - label.
    """
    logit, label = as_tensor(logit), as_tensor(label)
    x, y = logit.data, label.data
    data = y * _softplus(-x) + (1.0 - y) * _softplus(x)

    def vjp(g):
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (_unbroadcast(g * (s - y), logit.shape), _unbroadcast(g * (-x), label.shape))

    return _result(data, (logit, label), vjp)


def huber(a) -> Tensor:
    """Elementwise smooth-L1 (quadratic below 1, linear above)."""
    a = as_tensor(a)
    d = a.data
    absd = np.abs(d)
    data = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    return _result(data, (a,), lambda g: (g * np.clip(d, -1.0, 1.0),))


def dropout(a, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return _result(a.data, (a,), lambda g: (g,))
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def pad2d(a, padding: int) -> Tensor:
    """Zero-pad the two trailing axes of a [C, H, W] tensor."""
    a = as_tensor(a)
    if padding == 0:
        return _result(a.data, (a,), lambda g: (g,))
    p = padding
    data = np.pad(a.data, ((0, 0), (p, p), (p, p)))
    return _result(data, (a,), lambda g: (g[:, p:-p, p:-p],))


def unfold(a, ksize: int, stride: int = 1, padding: int = 0) -> Tensor:
    """im2col on a [C, H, W] tensor -> [C*k*k, out_h*out_w]."""
    a = as_tensor(a)
    if a.ndim != 3:
        raise _shape_error("unfold", a.shape)
    c, h, w = a.shape
    xp = np.pad(a.data, ((0, 0), (padding, padding), (padding, padding))) if padding else a.data
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - ksize) // stride + 1
    ow = (wp - ksize) // stride + 1
    if oh <= 0 or ow <= 0:
        raise _shape_error(f"unfold(k={ksize},s={stride},p={padding})", a.shape)
    cols = np.empty((c, ksize, ksize, oh, ow), dtype=a.data.dtype)
    for di in range(ksize):
        for dj in range(ksize):
            cols[:, di, dj] = xp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride]

    def vjp(g):
        gc = g.reshape(c, ksize, ksize, oh, ow)
        gp = np.zeros((c, hp, wp), dtype=g.dtype)
        for di in range(ksize):
            for dj in range(ksize):
                gp[:, di : di + stride * oh : stride, dj : dj + stride * ow : stride] += gc[:, di, dj]
        if padding:
            gp = gp[:, padding:-padding, padding:-padding]
        return (gp,)

    return _result(cols.reshape(c * ksize * ksize, oh * ow), (a,), vjp)


def bilinear_sample(grid, coords) -> Tensor:
    """Sample a [C, H, W] grid at fractional (x, y) lattice coordinates.

    `coords` is a constant (N, 2) array; out-of-range coordinates clamp to
    the border. Output is (N, C); the result is exactly linear in the grid
    values, and gradients flow to the grid only.
    """
    grid = as_tensor(grid)
    if grid.ndim != 3:
        raise _shape_error("bilinear_sample", grid.shape)
    c, h, w = grid.shape
    pts = np.asarray(coords, dtype=np.float64)
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    g = grid.data
    data = (
        g[:, y0, x0] * w00 + g[:, y0, x1] * w01 + g[:, y1, x0] * w10 + g[:, y1, x1] * w11
    ).T

    def vjp(gout):
        gg = np.zeros_like(g)
        ch = np.arange(c)[:, None]
        gt = gout.T
        np.add.at(gg, (ch, y0[None, :], x0[None, :]), gt * w00[None, :])
        np.add.at(gg, (ch, y0[None, :], x1[None, :]), gt * w01[None, :])
        np.add.at(gg, (ch, y1[None, :], x0[None, :]), gt * w10[None, :])
        np.add.at(gg, (ch, y1[None, :], x1[None, :]), gt * w11[None, :])
        return (gg,)

    return _result(data, (grid,), vjp)


# ---------------------------------------------------------------------------
# composite ops (built from primitives; gradients come for free)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = sub(a, tmax(a, axis=axis, keepdims=True))
    e = texp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    a = as_tensor(a)
    mu = tmean(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    return div(centered, tsqrt(add(var, eps)))


def linear(x, weight, bias=None) -> Tensor:
    """x [N, in] @ weight [in, out] (+ bias [out])."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on [C_in, H, W] with weight [C_out, C_in, k, k]."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    c_out, c_in, k, _ = weight.shape
    if x.shape[0] != c_in:
        raise _shape_error("conv2d", x.shape, weight.shape)
    if k == 1 and stride == 1 and padding == 0:
        cols = reshape(x, (c_in, x.shape[1] * x.shape[2]))
        oh, ow = x.shape[1], x.shape[2]
    else:
        cols = unfold(x, k, stride, padding)
        oh = (x.shape[1] + 2 * padding - k) // stride + 1
        ow = (x.shape[2] + 2 * padding - k) // stride + 1
    wm = reshape(weight, (c_out, c_in * k * k))
    out = matmul(wm, cols)
    if bias is not None:
        out = add(out, reshape(bias, (c_out, 1)))
    return reshape(out, (c_out, oh, ow))


def max_pool_2x2(x) -> Tensor:
    """2x2 max pooling on [C, H, W] with even H and W."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise _shape_error("max_pool_2x2", x.shape)
    r = reshape(x, (c, h // 2, 2, w // 2, 2))
    return tmax(tmax(r, axis=4), axis=2)


def smooth_l1(pred, target) -> Tensor:
    """Mean elementwise smooth-L1 between two equal-length tensors."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise _shape_error("smooth_l1", pred.shape, target.shape)
    return tmean(huber(sub(pred, target)))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; iterates parameters in sorted-name order
    so updates are deterministic for a given seed and parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.params):
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"adam_m/{name}"].astype(self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = arrays[f"adam_v/{name}"].astype(self.v[name].dtype).reshape(self.v[name].shape)


# ---------------------------------------------------------------------------
# checkpoints: magic header + JSON index + raw little-endian float32 data


CHECKPOINT_MAGIC = b"CFCKPT01"


def save_checkpoint(path, params: dict[str, Tensor], config: dict, step: int,
                    optimizer: Adam | None = None) -> None:
    arrays: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    opt_meta = None
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        opt_meta = {"t": optimizer.t}
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        flat = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(flat.shape), "offset": offset,
                        "size": int(flat.size)})
        blobs.append(flat.tobytes())
        offset += flat.size * 4
    header = json.dumps({
        "format_version": 1,
        "config": config,
        "step": step,
        "optimizer": opt_meta,
        "entries": entries,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


class Checkpoint(dict):
    """Loaded checkpoint: arrays dict plus config/step/optimizer metadata."""

    def __init__(self, arrays, config, step, optimizer_meta):
        super().__init__(arrays)
        self.config = config
        self.step = step
        self.optimizer_meta = optimizer_meta

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.items() if not k.startswith("adam_")}

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.items() if k.startswith("adam_")}


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    arrays = {}
    for e in header["entries"]:
        start = e["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=e["size"], offset=start)
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(arrays, header["config"], header["step"], header.get("optimizer"))
