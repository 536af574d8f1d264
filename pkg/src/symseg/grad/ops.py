"""Differentiable operations over :class:`~symseg.grad.tensor.Tensor`.

Every op validates shapes, checks its output for NaN/Inf, and registers a
backward rule on the active tape when any input requires gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, _Node, active_tape

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul",
    "exp", "log", "sigmoid", "tanh", "relu", "clamp_min",
    "softmax", "sum_", "mean", "concat", "reshape", "slice_axis",
    "conv2d", "max_pool2d", "upsample2d", "batch_norm",
    "global_avg_pool", "broadcast_spatial", "lstm_step",
]


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, name: str) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"non-finite values produced by op '{name}'")
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if out.requires_grad and tape is not None:
        tape.record(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities

def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    y = np.log(a.data)
    return _make(y, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); zero subgradient where the clamp is active."""
    a = _lift(a)
    mask = a.data > floor
    out = np.maximum(a.data, floor)
    return _make(out, (a,), lambda g: (g * mask,), "clamp_min")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# reductions and reshaping

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes)

    def backward(g):
        ge = np.expand_dims(g, axes) if g.ndim < a.ndim else g
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes)

    def backward(g):
        ge = np.expand_dims(g, axes) if g.ndim < a.ndim else g
        return (np.broadcast_to(ge, a.shape).copy() / count,)

    return _make(out, (a,), backward, "mean")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd:
            raise ShapeError("concat operands differ in rank")
        for d in range(nd):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(
                    f"concat: shapes {[u.shape for u in tensors]} disagree off axis {axis}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), backward, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _lift(a)
    axis = axis % a.ndim
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = tuple(slice(None) if d != axis else slice(start, stop) for d in range(a.ndim))
    out = a.data[idx].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), backward, "slice")


# ---------------------------------------------------------------------------
# spatial ops

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernels."""
    x, weight = _lift(x), _lift(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw, :, :]                     # [n, c, ho, wo, kh, kw]
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    wm = weight.data.reshape(co, c * kh * kw)
    out = np.matmul(wm, cols)                               # [n, co, ho*wo]
    out = out.reshape(n, co, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)

    def backward(g):
        gf = g.reshape(n, co, ho * wo)
        dw = np.einsum("ncl,nkl->ck", gf, cols).reshape(weight.shape)
        dcols = np.matmul(wm.T, gf).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, :, i, j]
        dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
        if bias is None:
            return dx, dw
        return dx, dw, gf.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling (stride == kernel)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    k = int(kernel)
    if h % k or w % k:
        raise ShapeError(f"max_pool2d: spatial extents {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dwin = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (dwin.reshape(n, c, h, w),)

    return _make(out, (x,), backward, "max_pool2d")


def upsample2d(x: Tensor, scale: int = 2) -> Tensor:
    """Nearest-neighbor upsampling by an integer factor."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    s = int(scale)
    out = np.repeat(np.repeat(x.data, s, axis=2), s, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, s, w, s).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Tensor, running_var: Tensor,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode normalizes with the stored running
    statistics.  Variance is the biased (1/m) estimate throughout.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine params must have shape ({c},)")
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mu
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = gm * xhat + bt
        m = n * h * w

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gm
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv.reshape(1, c, 1, 1) * (dxhat - s1 / m - xhat * s2 / m)
            return dx, dgamma, dbeta

        return _make(out, (x, gamma, beta), backward, "batch_norm")

    inv = 1.0 / np.sqrt(running_var.data + eps)
    xhat = (x.data - running_mean.data.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gm * xhat + bt

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = g * gm * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC spatial mean."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape).copy() / (h * w),)

    return _make(out, (x,), backward, "global_avg_pool")


def broadcast_spatial(v: Tensor, height: int, width: int) -> Tensor:
    """NC -> NCHW by repeating each feature vector over the spatial grid."""
    v = _lift(v)
    if v.ndim != 2:
        raise ShapeError(f"broadcast_spatial expects 2-d input, got {v.shape}")
    n, c = v.shape
    out = np.broadcast_to(v.data[:, :, None, None], (n, c, height, width)).copy()

    def backward(g):
        return (g.sum(axis=(2, 3)),)

    return _make(out, (v,), backward, "broadcast_spatial")


# ---------------------------------------------------------------------------
# recurrent cell

def lstm_step(x: Tensor, h: Tensor, c: Tensor,
              wx: Tensor, wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One canonical LSTM cell step.

    Gate pre-activations are ``x @ wx + h @ wh + b`` split into input,
    forget, candidate, output blocks; ``c' = f*c + i*g`` and
    ``h' = o * tanh(c')``.  Composed from primitive ops, so it is
    differentiable through time when chained.
    """
    x, h, c = _lift(x), _lift(h), _lift(c)
    if x.ndim != 2 or h.ndim != 2 or c.ndim != 2:
        raise ShapeError("lstm_step expects 2-d x, h, c")
    four_cell = wx.shape[1]
    if four_cell % 4:
        raise ShapeError(f"lstm_step: gate width {four_cell} not divisible by 4")
    cell = four_cell // 4
    if wh.shape[1] != four_cell or b.shape != (four_cell,):
        raise ShapeError("lstm_step: wx/wh/b gate widths disagree")
    if x.shape[1] != wx.shape[0]:
        raise ShapeError(f"lstm_step: input width {x.shape[1]} != wx rows {wx.shape[0]}")
    if h.shape[1] != wh.shape[0]:
        raise ShapeError(f"lstm_step: hidden width {h.shape[1]} != wh rows {wh.shape[0]}")
    if c.shape[1] != cell:
        raise ShapeError(f"lstm_step: cell width {c.shape[1]} != {cell}")

    gates = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(slice_axis(gates, 1, 0, cell))
    f = sigmoid(slice_axis(gates, 1, cell, 2 * cell))
    g = tanh(slice_axis(gates, 1, 2 * cell, 3 * cell))
    o = sigmoid(slice_axis(gates, 1, 3 * cell, 4 * cell))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# operator sugar on Tensor

def _as_method(fn):
    def method(self, other):
        return fn(self, other)
    return method


Tensor.__add__ = _as_method(add)
Tensor.__radd__ = _as_method(lambda a, b: add(b, a))
Tensor.__sub__ = _as_method(sub)
Tensor.__rsub__ = _as_method(lambda a, b: sub(b, a))
Tensor.__mul__ = _as_method(mul)
Tensor.__rmul__ = _as_method(lambda a, b: mul(b, a))
Tensor.__truediv__ = _as_method(div)
Tensor.__rtruediv__ = _as_method(lambda a, b: div(b, a))
Tensor.__matmul__ = _as_method(matmul)
Tensor.__neg__ = neg
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = reshape
