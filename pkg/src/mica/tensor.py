"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a backward closure on a tape; calling ``backward()`` on a
scalar walks the tape in reverse topological order and accumulates gradients
into ``.grad`` buffers.  The op vocabulary is deliberately small: matmul,
elementwise arithmetic with broadcasting, softmax over the last axis, the
positive feature map phi(x) = ELU(x) + 1, sigmoid, gelu, reductions, and
shape ops (reshape / swapaxes / concat / gather).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf while finite checks are on."""


class _ThreadState(threading.local):
    """Per-thread mode flags; a shared global would race under the
    thread pool used for parallel seeds."""

    def __init__(self):
        self.grad_enabled = True
        self.finite_checks = True


_STATE = _ThreadState()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (current thread only)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle NaN/Inf checking on op outputs inside the block."""
    prev = _STATE.finite_checks
    _STATE.finite_checks = enabled
    try:
        yield
    finally:
        _STATE.finite_checks = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _STATE.finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # -- introspection -----------------------------------------------------
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- grad bookkeeping --------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into ``.grad`` buffers."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        return swapaxes(self, ax1, ax2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable) -> Tensor:
    _check_finite(data, op)
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True,
                      _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data),
                                       b.shape))

    return _make(out, "div", (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, "matmul", (a, b), backward)


# -- nonlinearities ----------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            # d softmax: y * (g - sum(g * y))
            gy = (g * out).sum(axis=-1, keepdims=True)
            x._accumulate(out * (g - gy))

    return _make(out, "softmax", (x,), backward)


def phi(x) -> Tensor:
    """ELU(x) + 1, the strictly positive kernel feature map."""
    x = as_tensor(x)
    neg = np.exp(np.minimum(x.data, 0.0))
    out = np.where(x.data >= 0.0, x.data + 1.0, neg)
    # keep the output strictly positive even where exp underflows
    out = np.fmax(out, np.nextafter(0.0, 1.0))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.where(x.data >= 0.0, 1.0, neg))

    return _make(out, "phi", (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return _make(out, "sigmoid", (x,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner
            x._accumulate(g * dx)

    return _make(out, "gelu", (x,), backward)


def tabs(x) -> Tensor:
    x = as_tensor(x)
    out = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.sign(x.data))

    return _make(out, "abs", (x,), backward)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * 0.5 / out)

    return _make(out, "sqrt", (x,), backward)


# -- reductions and shape ops -------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(a % x.ndim for a in axes)
                gg = np.expand_dims(g, axes)
            x._accumulate(np.broadcast_to(gg, x.shape))

    return _make(np.asarray(out), "sum", (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, *shape) -> Tensor:
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _make(out, "reshape", (x,), backward)


def swapaxes(x, ax1: int, ax2: int) -> Tensor:
    x = as_tensor(x)
    out = x.data.swapaxes(ax1, ax2)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.swapaxes(ax1, ax2))

    return _make(out, "swapaxes", (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, "concat", tuple(ts), backward)


def gather_last(x, index: np.ndarray) -> Tensor:
    """Index the last axis with an integer array; output shape is
    ``x.shape[:-1] + index.shape``."""
    x = as_tensor(x)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather_last needs an integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ShapeError(
            f"gather index out of range for axis of size {x.shape[-1]}")
    out = x.data[..., idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (Ellipsis, idx), g)
            x._accumulate(gx)

    return _make(out, "gather", (x,), backward)
