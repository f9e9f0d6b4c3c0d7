"""Dense float64 tensors with taped reverse-mode gradients.

A forward pass runs inside a ``Graph`` context; each differentiable op
appends one node to the tape, and ``Graph.backward`` replays the tape in
exact reverse execution order (which is a reverse topological order of the
forward pass by construction). Ops called with no active graph just compute
values, which doubles as inference / no-grad mode.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A forward value came out non-finite (NaN or Inf)."""


class GraphError(RuntimeError):
    """Tape misuse, e.g. running backward twice on one forward pass."""


class _State(threading.local):
    def __init__(self):
        self.graph: Graph | None = None
        self.check_finite = True


_state = _State()


def set_check_finite(flag: bool) -> None:
    """Globally (per thread) enable or disable non-finite output checks."""
    _state.check_finite = bool(flag)


class check_finite:
    """Context manager that temporarily toggles non-finite output checks."""

    def __init__(self, flag: bool):
        self._flag = bool(flag)

    def __enter__(self):
        self._prev = _state.check_finite
        _state.check_finite = self._flag
        return self

    def __exit__(self, *exc):
        _state.check_finite = self._prev
        return False


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _state.graph
        _state.graph = None
        return self

    def __exit__(self, *exc):
        _state.graph = self._prev
        return False


class Tensor:
    """Row-major float64 array plus gradient accumulator.

    ``grad`` is lazily created by backward passes and accumulated across
    them until reset, which is what batched gradient accumulation relies on.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _state.check_finite and not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars take a cheap dedicated path
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """Ordered record of executed ops for one forward pass."""

    __slots__ = ("_nodes", "_consumed", "_prev")

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = _state.graph
        _state.graph = self
        return self

    def __exit__(self, *exc):
        _state.graph = self._prev
        self._prev = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, into: dict | None = None) -> None:
        """Accumulate d(loss)/d(input) into .grad of every recorded tensor.

        With ``into`` given, gradients accumulate into that dict (keyed by
        tensor) instead of touching .grad, which lets concurrent backward
        passes over shared parameters stay isolated.
        """
        if self._consumed:
            raise GraphError("backward already ran on this graph; run a new forward first")
        self._consumed = True
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if into is None:
            loss.grad = np.ones_like(loss.data)
            for out, inputs, bwd in reversed(self._nodes):
                out_grad = out.grad
                if out_grad is None:
                    continue  # not on any path to the loss
                grads = bwd(out_grad)
                for t, g in zip(inputs, grads):
                    if g is None or not t.requires_grad:
                        continue
                    if t.grad is None:
                        t.grad = g
                    else:
                        t.grad = t.grad + g  # out-of-place: grads may alias out_grad
            return
        grads_map: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for out, inputs, bwd in reversed(self._nodes):
            out_grad = grads_map.pop(out, None)
            if out_grad is None:
                continue
            grads = bwd(out_grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                cur = grads_map.get(t)
                grads_map[t] = g if cur is None else cur + g
        into.update(grads_map)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable, op: str) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in output of {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    g = _state.graph
    if g is not None and out.requires_grad:
        g._nodes.append((out, inputs, bwd))
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable, name: str = "custom") -> Tensor:
    """Register a fused op: ``bwd(out_grad)`` must return one gradient per input."""
    return _make(np.asarray(data, dtype=np.float64), tuple(inputs), bwd, name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise and broadcasting arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _make(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    ash, bsh = a.data.shape, b.data.shape

    def bwd(g):
        return (_unbroadcast(g, ash), _unbroadcast(-g, bsh))

    return _make(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _make(ad * bd, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        )

    return _make(ad / bd, (a, b), bwd, "div")


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return _make(a.data * s, (a,), bwd, "scale")


def shift(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g,)

    return _make(a.data + s, (a,), bwd, "shift")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        return (-g,)

    return _make(-a.data, (a,), bwd, "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bwd(g):
        return (g * p * np.power(ad, p - 1.0),)

    return _make(np.power(ad, p), (a,), bwd, "power")


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        return (g * out_data,)

    return _make(out_data, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), bwd, "log")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out_data),)

    return _make(out_data, (a,), bwd, "sqrt")


def sin(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (g * np.cos(ad),)

    return _make(np.sin(ad), (a,), bwd, "sin")


def cos(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (-g * np.sin(ad),)

    return _make(np.cos(ad), (a,), bwd, "cos")


def absolute(a) -> Tensor:
    a = _wrap(a)
    ad = a.data

    def bwd(g):
        return (g * np.sign(ad),)

    return _make(np.abs(ad), (a,), bwd, "absolute")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0

    def bwd(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd, "relu")


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = _kernels.sigmoid_stable(a.data)

    def bwd(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), bwd, "sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)

    def bwd(g):
        return (g * inside,)

    return _make(np.clip(ad, lo, hi), (a,), bwd, "clip")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise DimensionError(f"matmul supports 2D/3D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(np.matmul(ad, bd), (a, b), bwd, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bwd, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def bwd(g):
        return (g.reshape(old),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make(data, (a,), bwd, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        ) from None
    return _make(data, tuple(ts), bwd, "concat")


def gather(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Index rows of ``a`` along axis 0 by an integer array."""
    if axis != 0:
        raise DimensionError("gather supports axis 0 only")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("gather index must be an integer array")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather index out of range for first dimension {n}")
    ad = a.data

    def bwd(g):
        dz = np.zeros_like(ad)
        np.add.at(dz, idx, g)
        return (dz,)

    return _make(np.take(ad, idx, axis=0), (a,), bwd, "gather")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        mask_b = np.broadcast_to(mask, a.data.shape)
    except ValueError:
        raise DimensionError(
            f"masked_fill: mask shape {mask.shape} does not broadcast to {a.shape}"
        ) from None
    keep = ~mask_b

    def bwd(g):
        return (g * keep,)

    out_data = np.where(mask_b, value, a.data)
    # the fill value may legitimately be -inf (hard attention masking)
    if _state.check_finite and not np.all(np.isfinite(a.data)):
        raise NumericError("non-finite values in input of masked_fill")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = a.requires_grad
    out.grad = None
    g_ = _state.graph
    if g_ is not None and out.requires_grad:
        g_._nodes.append((out, (a,), bwd))
    return out


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ad = a.data

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ad.shape).copy(),)

    return _make(ad.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ad = a.data
    if axis is None:
        count = ad.size
    else:
        count = ad.shape[axis] if isinstance(axis, int) else int(np.prod([ad.shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, ad.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, ad.shape).copy(),)

    return _make(ad.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# fused neural-net primitives
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else a.ndim + axis
    if ax < 0 or ax >= a.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {a.shape}")
    if ax == a.ndim - 1:
        cols = a.shape[-1]
        x2 = np.ascontiguousarray(a.data).reshape(-1, cols)
        y2 = _kernels.softmax_rows(x2)
        out_data = y2.reshape(a.shape)

        def bwd(g):
            g2 = np.ascontiguousarray(g).reshape(-1, cols)
            return (_kernels.softmax_rows_grad(y2, g2).reshape(a.shape),)

    else:
        m = a.data.max(axis=ax, keepdims=True)
        e = np.exp(a.data - m)
        out_data = e / e.sum(axis=ax, keepdims=True)

        def bwd(g):
            s = (g * out_data).sum(axis=ax, keepdims=True)
            return (out_data * (g - s),)

    return _make(out_data, (a,), bwd, "softmax")


def attn_softmax(
    qk: Tensor,
    scale: float,
    bias: Tensor | None = None,
    blocked: np.ndarray | None = None,
) -> Tensor:
    """Fused softmax(scale * qk + bias) over the last axis.

    ``blocked`` (bool, broadcastable to qk) zeroes attention to those
    entries; it is mutually exclusive with ``bias``.
    """
    if bias is not None and blocked is not None:
        raise DimensionError("attn_softmax takes bias or blocked, not both")
    shape = qk.shape
    cols = shape[-1]
    qk2 = np.ascontiguousarray(qk.data).reshape(-1, cols)
    bias2 = None
    if bias is not None:
        if bias.shape != shape:
            raise DimensionError(f"attn_softmax: bias shape {bias.shape} != {shape}")
        bias2 = np.ascontiguousarray(bias.data).reshape(-1, cols)
    blocked2 = None
    if blocked is not None:
        blocked2 = np.ascontiguousarray(
            np.broadcast_to(blocked, shape).astype(np.uint8)
        ).reshape(-1, cols)
    y2 = _kernels.attn_softmax_forward(qk2, scale, bias2, blocked2)

    inputs = (qk,) if bias is None else (qk, bias)

    def bwd(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cols)
        dlog = _kernels.softmax_rows_grad(y2, g2)
        dqk = (dlog * scale).reshape(shape)
        if bias is None:
            return (dqk,)
        return (dqk, dlog.reshape(shape))

    return _make(y2.reshape(shape), inputs, bwd, "attn_softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else a.ndim + axis
    m = a.data.max(axis=ax, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        return (g - np.exp(out_data) * g.sum(axis=ax, keepdims=True),)

    return _make(out_data, (a,), bwd, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgain, dbias)

    return _make(xhat * gd + bias.data, (a, gain, bias), bwd, "layer_norm")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def mlp2(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two affine layers with a ReLU in between."""
    return linear(relu(linear(x, w1, b1)), w2, b2)
