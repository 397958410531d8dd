"""Float32 tensors with a reverse-mode gradient tape.

Only the operations the dose model actually needs are provided: dense
matmul, row softmax with an optional attend mask, 3x3 convolutions and
their stride-2 transpose, 2x2 average pooling, group/layer
normalization, the usual activations, dropout and elementwise
arithmetic. Values are float32 end to end; reductions accumulate in
float64 before rounding back, which keeps comparisons against
finite-difference oracles tight.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ConfigurationError",
    "UsageError",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "slice_",
    "sum_",
    "mean_",
    "relu",
    "gelu",
    "dropout",
    "softmax",
    "conv2d",
    "conv2d_transposed",
    "avg_pool2d",
    "group_norm",
    "layer_norm",
    "backward",
]

_f32 = np.float32


class DimensionError(ValueError):
    """Shapes passed to an operation do not line up."""


class ConfigurationError(ValueError):
    """An operation or model was configured with impossible settings."""


class UsageError(RuntimeError):
    """The gradient tape was used in an unsupported way."""


_seq_counter = itertools.count()
_grad_enabled = [True]


class no_grad:
    """Context manager that pauses recording onto the gradient tape."""

    def __enter__(self):
        self._prev = _grad_enabled[0]
        _grad_enabled[0] = False
        return self

    def __exit__(self, *exc):
        _grad_enabled[0] = self._prev
        return False


class Tensor:
    """A dense float32 array plus its slot on the gradient tape.

    Tensors created by operations remember their parents and a closure
    computing parent gradients; ``backward`` walks those records once
    each, in reverse execution order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_f32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _record(data, parents, grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return np.asarray(g, dtype=_f32)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data + b.data

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _record(data, (a, b), grad_fn)
    const = np.asarray(b, dtype=_f32)
    data = a.data + const

    def grad_fn(g):
        return (_unbroadcast(g, a.shape),)

    return _record(data, (a,), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data - b.data

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _record(data, (a, b), grad_fn)
    const = np.asarray(b, dtype=_f32)
    data = a.data - const

    def grad_fn(g):
        return (_unbroadcast(g, a.shape),)

    return _record(data, (a,), grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (-g,)

    return _record(-a.data, (a,), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data * b.data
        ad, bd = a.data, b.data

        def grad_fn(g):
            return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

        return _record(data, (a, b), grad_fn)
    const = np.asarray(b, dtype=_f32)
    data = a.data * const

    def grad_fn(g):
        return (_unbroadcast(g * const, a.shape),)

    return _record(data, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(data, (a, b), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    old = x.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _record(data, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _record(data, (x,), grad_fn)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _record(data, tuple(parts), grad_fn)


def slice_(x: Tensor, key) -> Tensor:
    data = x.data[key]
    old = x.shape

    def grad_fn(g):
        gx = np.zeros(old, dtype=_f32)
        gx[key] = g
        return (gx,)

    return _record(data, (x,), grad_fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(_f32)
    old = x.shape
    axes = _normalize_axes(axis, x.ndim)

    def grad_fn(g):
        gg = g
        if axes is not None and not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, old).astype(_f32),)

    return _record(data, (x,), grad_fn)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(_f32)
    old = x.shape
    axes = _normalize_axes(axis, x.ndim)
    if axes is None:
        count = x.size
    else:
        count = int(np.prod([old[a] for a in axes]))
    scale = _f32(1.0 / count)

    def grad_fn(g):
        gg = g
        if axes is not None and not keepdims:
            gg = np.expand_dims(g, axes)
        return ((np.broadcast_to(gg, old) * scale).astype(_f32),)

    return _record(data, (x,), grad_fn)


def _normalize_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0

    def grad_fn(g):
        return (np.where(mask, g, 0).astype(_f32),)

    return _record(data, (x,), grad_fn)


_GELU_C = _f32(np.sqrt(2.0 / np.pi))
_GELU_A = _f32(0.044715)


def gelu(x: Tensor) -> Tensor:
    """GELU in the tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(inner)
    data = _f32(0.5) * xd * (1 + t)

    def grad_fn(g):
        sech2 = 1 - t * t
        dinner = _GELU_C * (1 + 3 * _GELU_A * xd * xd)
        local = _f32(0.5) * (1 + t) + _f32(0.5) * xd * sech2 * dinner
        return ((g * local).astype(_f32),)

    return _record(data, (x,), grad_fn)


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-rate).

    With ``training`` false (or rate 0) this is the identity and records
    nothing on the tape.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("training-mode dropout requires a seeded rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(_f32) / _f32(1.0 - rate)
    data = x.data * mask

    def grad_fn(g):
        return ((g * mask).astype(_f32),)

    return _record(data, (x,), grad_fn)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, numerically stabilized.

    ``mask`` is a boolean array broadcastable to ``x`` marking positions
    that may be attended to; excluded positions get exactly zero weight
    (their logits are sent to -inf before the shift). Every row must
    keep at least one allowed position.
    """
    logits = x.data
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise DimensionError("softmax mask excludes an entire row")
        logits = np.where(mask, logits, _f32(-np.inf))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(shifted, dtype=_f32)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64).astype(_f32)
    out = e / denom

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=np.float64).astype(_f32)
        return ((out * (g - dot)).astype(_f32),)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# convolutions and pooling (3x3 kernels, zero padding 1)


def _im2col(arr: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = arr.shape
    xp = np.pad(arr, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=_f32)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = xp[
                :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
            ]
    return cols.reshape(n, c * 9, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    c6 = cols.reshape(n, c, 3, 3, ho, wo)
    xp = np.zeros((n, c, h + 2, w + 2), dtype=_f32)
    for di in range(3):
        for dj in range(3):
            xp[
                :, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride
            ] += c6[:, :, di, dj]
    return xp[:, :, 1:-1, 1:-1]


def _check_conv_args(x: Tensor, kernels: Tensor):
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError("conv expects x of rank 4 (N,C,H,W) and kernels of rank 4")
    if kernels.shape[2:] != (3, 3):
        raise DimensionError(f"kernel spatial size must be 3x3, got {kernels.shape[2:]}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with 3x3 kernels and size-preserving zero padding.

    ``x`` is (N, C_in, H, W), ``kernels`` is (C_out, C_in, 3, 3). With
    stride 1 the spatial size is preserved; stride 2 halves it.
    """
    _check_conv_args(x, kernels)
    n, c, h, w = x.shape
    co, ci = kernels.shape[:2]
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernels expect {ci}")
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    cols = _im2col(x.data, stride, ho, wo)
    wm = kernels.data.reshape(co, ci * 9)
    data = np.matmul(wm[None], cols).reshape(n, co, ho, wo)

    def grad_fn(g):
        gm = g.reshape(n, co, ho * wo)
        dw = (
            np.matmul(gm, cols.transpose(0, 2, 1))
            .sum(axis=0, dtype=np.float64)
            .astype(_f32)
            .reshape(kernels.shape)
        )
        dcols = np.matmul(wm.T[None], gm)
        dx = _col2im(dcols, (n, c, h, w), stride, ho, wo)
        return dx, dw

    return _record(data, (x, kernels), grad_fn)


def conv2d_transposed(x: Tensor, kernels: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of ``conv2d`` with the same kernels.

    ``x`` is (N, C_out, H, W) in the kernel's output-channel space;
    the result is (N, C_in, stride*H, stride*W).
    """
    _check_conv_args(x, kernels)
    n, co_in, h, w = x.shape
    co, ci = kernels.shape[:2]
    if co_in != co:
        raise DimensionError(
            f"conv2d_transposed channel mismatch: input {co_in}, kernels expect {co}"
        )
    hout, wout = stride * h, stride * w
    xm = x.data.reshape(n, co, h * w)
    wm = kernels.data.reshape(co, ci * 9)
    cols = np.matmul(wm.T[None], xm)
    data = _col2im(cols, (n, ci, hout, wout), stride, h, w)

    def grad_fn(g):
        gcols = _im2col(g, stride, h, w)
        dx = np.matmul(wm[None], gcols).reshape(x.shape)
        dw = (
            np.matmul(xm, gcols.transpose(0, 2, 1))
            .sum(axis=0, dtype=np.float64)
            .astype(_f32)
            .reshape(kernels.shape)
        )
        return dx, dw

    return _record(data, (x, kernels), grad_fn)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; H and W must be even."""
    if x.ndim != 4:
        raise DimensionError("avg_pool2d expects (N, C, H, W)")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    data = (
        x.data.reshape(n, c, ho, 2, wo, 2)
        .mean(axis=(3, 5), dtype=np.float64)
        .astype(_f32)
    )

    def grad_fn(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return ((up * _f32(0.25)).astype(_f32),)

    return _record(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each sample's channel groups to zero mean, unit variance.

    ``x`` is (N, C, H, W); ``gain`` and ``bias`` are per-channel (C,).
    Statistics are per (sample, group), so samples never mix.
    """
    if x.ndim != 4:
        raise DimensionError("group_norm expects (N, C, H, W)")
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigurationError(f"channels {c} not divisible by {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError("group_norm gain/bias must have shape (C,)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = (xg * xg).mean(axis=-1, keepdims=True, dtype=np.float64) - mu * mu
    inv = (1.0 / np.sqrt(var + eps)).astype(_f32)
    xhat = ((xg - mu.astype(_f32)) * inv).reshape(n, c, h, w)
    gb = gain.data.reshape(1, c, 1, 1)
    data = xhat * gb + bias.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(_f32)
        dbias = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(_f32)
        dxh = (g * gb).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        t1 = dxh.mean(axis=-1, keepdims=True, dtype=np.float64).astype(_f32)
        t2 = (dxh * xh).mean(axis=-1, keepdims=True, dtype=np.float64).astype(_f32)
        dx = (inv * (dxh - t1 - xh * t2)).reshape(x.shape).astype(_f32)
        return dx, dgain, dbias

    return _record(data, (x, gain, bias), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm gain/bias must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = (xd * xd).mean(axis=-1, keepdims=True, dtype=np.float64) - mu * mu
    inv = (1.0 / np.sqrt(var + eps)).astype(_f32)
    xhat = (xd - mu.astype(_f32)) * inv
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes, dtype=np.float64).astype(_f32)
        dbias = g.sum(axis=reduce_axes, dtype=np.float64).astype(_f32)
        dxh = g * gain.data
        t1 = dxh.mean(axis=-1, keepdims=True, dtype=np.float64).astype(_f32)
        t2 = (dxh * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(_f32)
        dx = (inv * (dxh - t1 - xhat * t2)).astype(_f32)
        return dx, dgain, dbias

    return _record(data, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable leaf.

    Each recorded operation is visited exactly once, in reverse
    execution order. Leaf tensors with ``requires_grad`` get their
    ``grad`` buffers created or accumulated into.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._grad_fn is None:
        raise UsageError("tensor is not connected to the gradient tape")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._seq in nodes:
            continue
        nodes[t._seq] = t
        for p in t._parents:
            if p._grad_fn is not None and p._seq not in nodes:
                stack.append(p)

    acc = {loss._seq: np.ones(loss.shape, dtype=_f32)}
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        g = acc.pop(seq, None)
        if g is None:
            continue
        grads = t._grad_fn(g)
        for parent, pg in zip(t._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._grad_fn is None:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                prev = acc.get(parent._seq)
                acc[parent._seq] = pg if prev is None else prev + pg
