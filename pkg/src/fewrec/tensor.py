"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed. A :class:`Tape` records every primitive op executed inside a
``record_tape()`` block; :func:`backward` replays the tape in reverse and
accumulates gradients into every tensor with ``requires_grad=True``. Outside
a recording block ops run plain, which is what evaluation uses.

Two float widths are supported: float32 for training runs, float64 for
gradient checks. Mixing them in one op is an error rather than a silent
upcast.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes (or dtypes) violate an op contract."""


class NumericError(ArithmeticError):
    """An op produced or was given non-finite values."""


class GraphError(RuntimeError):
    """Tape misuse: nested recording, missing tape, or non-scalar loss."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in result")
    return arr


class Tensor:
    """A dense float array plus gradient slot.

    ``data`` is always a float32 or float64 ndarray. ``grad``, once
    populated by :func:`backward`, has the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, cut from the graph. Shares the underlying array."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # arithmetic sugar; the module-level functions do the work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _TapeEntry:
    out: Tensor
    inputs: tuple
    backward: Callable  # (g_out: ndarray) -> tuple of ndarray-or-None per input


class Tape:
    """Ordered record of primitive ops from one forward pass.

    Append order is execution order, so it is already topological: every op
    lands after the ops that produced its inputs.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)


_state = threading.local()


def active_tape() -> Optional[Tape]:
    return getattr(_state, "tape", None)


@contextmanager
def record_tape():
    """Record primitive ops until the block exits. One tape per worker."""
    if active_tape() is not None:
        raise GraphError("a tape is already recording on this worker")
    tape = Tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = None


def _record(out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(_TapeEntry(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Visits each recorded op exactly once, in reverse record order, and frees
    the tape afterwards. Gradients accumulate into ``.grad`` (callers zero
    them between steps).
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise GraphError("backward() needs an active or explicit tape")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g_out = entry.out.grad
        if g_out is None:
            continue
        grads = entry.backward(g_out)
        for t, g in zip(entry.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
    tape.entries.clear()


# ---------------------------------------------------------------------------
# helpers


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _binary(a, b, op: str) -> tuple:
    if isinstance(a, Tensor):
        b = _coerce(b, a)
    elif isinstance(b, Tensor):
        a = _coerce(a, b)
    else:
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _eval(op: str, fn: Callable[[], np.ndarray]) -> np.ndarray:
    with np.errstate(all="ignore"):
        return _check_finite(fn(), op)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    out = Tensor(_eval("add", lambda: a.data + b.data))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    out = Tensor(_eval("sub", lambda: a.data - b.data))

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    out = Tensor(_eval("mul", lambda: a.data * b.data))

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _binary(a, b, "div")
    out = Tensor(_eval("div", lambda: a.data / b.data))

    def bwd(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)

    def bwd(g):
        return (-g,)

    return _record(out, (x,), bwd)


def scale(x: Tensor, s: Scalar) -> Tensor:
    """Multiply by a python scalar, preserving dtype."""
    s = float(s)
    out = Tensor(_eval("scale", lambda: x.data * x.data.dtype.type(s)))

    def bwd(g):
        return (g * s,)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out_data = _eval("exp", lambda: np.exp(x.data))
    out = Tensor(out_data)

    def bwd(g):
        return (g * out_data,)

    return _record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = Tensor(_eval("log", lambda: np.log(x.data)))

    def bwd(g):
        return (g / x.data,)

    return _record(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out_data = _eval("sqrt", lambda: np.sqrt(x.data))
    out = Tensor(out_data)

    def bwd(g):
        return (g * 0.5 / out_data,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape primitives


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort(axes)
    out = Tensor(x.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record(out, (x,), bwd)


def swap_last_two(x: Tensor) -> Tensor:
    """Transpose the trailing two axes, keeping batch axes in place."""
    if x.ndim < 2:
        raise ShapeError("swap_last_two needs ndim >= 2")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def narrow(x: Tensor, start: int, length: int, axis: int = 0) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    axis = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of "
                         f"extent {x.shape[axis]}")
    index = tuple(slice(None) if a != axis else slice(start, start + length)
                  for a in range(x.ndim))
    out = Tensor(x.data[index].copy())

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(int(a) % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _axis_tuple(axis, x.ndim)
    out = Tensor(_eval("sum", lambda: x.data.sum(axis=axis, keepdims=keepdims)))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _axis_tuple(axis, x.ndim)
    n = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def sum_squares(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Squared L2 reduction: sum of elementwise squares."""
    return tsum(mul(x, x), axis, keepdims)


# ---------------------------------------------------------------------------
# softmax family (last axis)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax along the last axis.

    Each output row is non-negative and sums to 1. Works on any ndim >= 1;
    leading axes are batch.
    """
    def fwd():
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    out_data = _eval("softmax_rows", fwd)
    out = Tensor(out_data)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _record(out, (x,), bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    """log(softmax) along the last axis, computed stably."""
    def fwd():
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    out_data = _eval("log_softmax_rows", fwd)
    out = Tensor(out_data)
    sm = np.exp(out_data)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# layer norm (last axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis row to mean 0, variance 1, then affine.

    Variance is the biased (1/d) estimate. Requires the normalized axis to
    have extent >= 2.
    """
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm: last axis must have extent >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    if not (x.dtype == gain.dtype == bias.dtype):
        raise ShapeError("layer_norm: mixed dtypes")

    with np.errstate(all="ignore"):
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
        xhat = xc * inv
        out_data = xhat * gain.data + bias.data
    _check_finite(out_data, "layer_norm")
    out = Tensor(out_data)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gh = g * gain.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = _binary(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out_data = _eval("matmul", lambda: a.data @ b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from None
    out = Tensor(out_data)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1.

    x: (N, C_in, H, W), w: (C_out, C_in, kh, kw). Bias is handled by the
    caller with a broadcast add.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d: x and w must be 4-D")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, {x.shape} vs {w.shape}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    p = int(padding)
    if h + 2 * p < kh or wd + 2 * p < kw:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    patches = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out_data = _eval("conv2d",
                     lambda: np.einsum("nchwij,ocij->nohw", patches, w.data,
                                       optimize=True))
    out = Tensor(out_data)
    ho, wo = out_data.shape[2], out_data.shape[3]

    def bwd(g):
        dw = np.einsum("nchwij,nohw->ocij", patches, g, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                # g:(n,o,ho,wo) x w[:,:,i,j]:(o,c) -> (n,ho,wo,c)
                dxp[:, :, i:i + ho, j:j + wo] += np.tensordot(
                    g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return dx, dw

    return _record(out, (x, w), bwd)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd tail rows/columns are dropped."""
    if x.ndim != 4:
        raise ShapeError("max_pool2d: input must be 4-D")
    s = int(size)
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {s}")
    crop = x.data[:, :, :ho * s, :wo * s]
    windows = crop.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, ho, wo, s * s)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dcrop = dflat.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * s, :wo * s] = dcrop.reshape(n, c, ho * s, wo * s)
        return (dx,)

    return _record(out, (x,), bwd)
