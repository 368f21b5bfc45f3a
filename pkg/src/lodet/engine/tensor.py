"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Without an active tape nothing is
recorded, so inference code never builds a graph.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import conv as _conv

_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported precision {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside are recorded in
    execution order, which is already a topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate ``.grad`` on every leaf tensor that requires a gradient.

        Gradients accumulate into existing ``.grad`` buffers. Returns a mapping
        from ``id(tensor)`` to its gradient for all tensors reached.
        """
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and not self.nodes:
            leaves[id(loss)] = loss
        for out, parents, fn in reversed(self.nodes):
            produced.add(id(out))
            g = grads.get(id(out))
            if g is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + gp
                else:
                    grads[k] = gp
                    leaves[k] = p
        for k, t in leaves.items():
            if k in produced:
                continue
            g = grads[k]
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()
        return grads


def backward(tape: Tape, loss: Tensor):
    return tape.backward(loss)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording on all tapes."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def tensor(data, requires_grad=False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by forward operation")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append((out, tuple(parents), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    data = a.data / b.data
    return _result(data, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result(data, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)
    return _result(data, (x,), lambda g: (g * 0.5 / data,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu6(x: Tensor) -> Tensor:
    data = np.clip(x.data, 0.0, 6.0)
    return _result(data, (x,), lambda g: (g * ((x.data > 0) & (x.data < 6)),))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None, revive: bool = False) -> Tensor:
    """Clamp with pass-through gradient inside ``[lo, hi]`` and zero outside.

    With ``revive`` the gradient below ``lo`` is also passed when descent
    would raise ``x`` (``g < 0``), so values stuck under the floor can
    recover. This is a surrogate, not the true derivative.
    """
    data = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    if revive and lo is not None:
        below = x.data < lo
        return _result(data, (x,), lambda g: (g * (inside | (below & (g < 0))),))
    return _result(data, (x,), lambda g: (g * inside,))


def smooth_l1(d: Tensor) -> Tensor:
    a = np.abs(d.data)
    data = np.where(a < 1.0, 0.5 * d.data * d.data, a - 0.5)
    return _result(data, (d,), lambda g: (g * np.where(a < 1.0, d.data, np.sign(d.data)),))


def bce_with_logits(x: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits, stable for large |x|."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=x.dtype)
    data = np.maximum(x.data, 0) - x.data * t + np.log1p(np.exp(-np.abs(x.data)))
    return _result(data, (x,), lambda g: (g * (sigmoid_np(x.data) - t),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return _result(s, (x,), fn)


# ----------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(data, (x,), fn)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ValueError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    data = np.array(x.data[idx])

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def fn(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)
    return _result(data, (x,), fn)


def channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """Channel slice ``x[:, lo:hi]``."""
    if not 0 <= lo < hi <= x.shape[1]:
        raise ValueError(f"channel range [{lo}, {hi}) outside 0..{x.shape[1]}")
    data = x.data[:, lo:hi].copy()

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)
    return _result(data, (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def fn(g):
        return tuple(np.take(g, range(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(xs)))
    return _result(data, xs, fn)


# ------------------------------------------------------------ layers / pooling

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with x of shape (N, in) and weight (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        out = (g @ weight.data, g.T @ x.data)
        return out if bias is None else out + (g.sum(axis=0),)
    return _result(data, parents, fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) channel means."""
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))
    return _result(data, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def upsample2x(x: Tensor) -> Tensor:
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return _result(data, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def max_pool2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)
    return _result(data, (x,), fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, groups: int = 1, padding: int = 0, method: str = "auto") -> Tensor:
    """2-d convolution over (N, C, H, W) input with (C_out, C_in/groups, k, k) weight."""
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
    data = _conv.conv2d_forward(x.data, weight.data, None if bias is None else bias.data,
                                stride, dilation, groups, padding, method)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gx, gw = _conv.conv2d_backward(g, x.data, weight.data, stride, dilation, groups, padding,
                                       need_x=x.requires_grad, need_w=weight.requires_grad)
        out = (gx, gw)
        return out if bias is None else out + (g.sum(axis=(0, 2, 3)),)
    return _result(data, parents, fn)


def channel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardisation over batch and spatial axes (no affine part)."""
    m = mean(x, axis=(0, 2, 3), keepdims=True)
    d = x - m
    var = mean(d * d, axis=(0, 2, 3), keepdims=True)
    return d / sqrt(var + eps)


# --------------------------------------------------------------- grad checking

def finite_diff_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                      analytic: Sequence[np.ndarray] | None = None, floor: float = 1e-12) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` must return a scalar tensor. Error per coordinate is
    ``|a - n| / max(floor, |a| + |n|)``; raise ``floor`` above the central
    difference noise (about ``1e-16 |f| / eps``) when gradients can be exactly
    zero. Pass ``analytic`` to check externally
    supplied gradients instead of running the tape.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
    if analytic is None:
        saved = [t.requires_grad for t in inputs]
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        with Tape() as tape:
            out = fn(*inputs)
        tape.backward(out)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        for t, s in zip(inputs, saved):
            t.requires_grad = s
            t.grad = None
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        af = np.asarray(a).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = fn(*inputs).item()
            flat[k] = orig - eps
            fm = fn(*inputs).item()
            flat[k] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differencing")
            num = (fp - fm) / (2 * eps)
            err = abs(af[k] - num) / max(floor, abs(af[k]) + abs(num))
            worst = max(worst, err)
    return worst
