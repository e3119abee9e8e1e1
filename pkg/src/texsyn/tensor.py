"""Dense float64 tensors with tape-based reverse-mode differentiation.

The tape lives on the tensors themselves: every operation stores its parent
tensors and a closure that routes the output gradient back to them, plus a
monotonically increasing node id. ``backward()`` collects the reachable part
of the tape and replays the closures in decreasing creation order, which is a
valid reverse topological order because an op's output is always created
after its inputs. Each recorded node is visited exactly once per pass.

Broadcasting follows numpy; gradients of broadcast operands are summed back
to the operand's shape. Data is row-major float64 throughout.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Operand values lie outside an operation's numeric domain."""


_NODE_IDS = itertools.count()


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int):
    """Validate a reduce axis spec; returns a tuple of non-negative axes or None."""
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"reduce axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated reduce axis in {axes}")
    return tuple(sorted(out))


class Tensor:
    """N-d float64 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # same-shape ndarray, populated by backward()
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._node_id = next(_NODE_IDS)

    # ------------------------------------------------------------------
    # basics

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
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # ------------------------------------------------------------------
    # autodiff plumbing

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every tracked ancestor."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[Tensor] = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._grad_fn is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._node_id, reverse=True)
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node.grad is not None:
                node._grad_fn(node.grad)

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        a, b = self, _coerce(other)

        def grad_fn(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _op(a.data + b.data, (a, b), grad_fn)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _coerce(other)

        def grad_fn(g):
            _accumulate(a, g)
            _accumulate(b, -g)

        return _op(a.data - b.data, (a, b), grad_fn)

    def __rsub__(self, other):
        return _coerce(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _coerce(other)

        def grad_fn(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return _op(a.data * b.data, (a, b), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _coerce(other)

        def grad_fn(g):
            _accumulate(a, g / b.data)
            _accumulate(b, -g * a.data / (b.data * b.data))

        return _op(a.data / b.data, (a, b), grad_fn)

    def __rtruediv__(self, other):
        return _coerce(other).__truediv__(self)

    def __neg__(self):
        src = self

        def grad_fn(g):
            _accumulate(src, -g)

        return _op(-src.data, (src,), grad_fn)

    def matmul(self, other) -> "Tensor":
        a, b = self, _coerce(other)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")

        def grad_fn(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

        return _op(a.data @ b.data, (a, b), grad_fn)

    __matmul__ = matmul

    # ------------------------------------------------------------------
    # shape ops

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        src = self
        data = np.transpose(src.data, axes)
        if axes is None:
            inverse = None
        else:
            inverse = np.argsort(axes)

        def grad_fn(g):
            _accumulate(src, np.transpose(g, inverse))

        return _op(data, (src,), grad_fn)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def reshape(self, shape) -> "Tensor":
        src = self
        data = src.data.reshape(shape)

        def grad_fn(g):
            _accumulate(src, g.reshape(src.data.shape))

        return _op(data, (src,), grad_fn)

    def __getitem__(self, key) -> "Tensor":
        src = self
        data = src.data[key]

        def grad_fn(g):
            if not src.requires_grad:
                return
            if src.grad is None:
                src.grad = np.zeros_like(src.data)
            np.add.at(src.grad, key, g)

        return _op(np.array(data, dtype=np.float64), (src,), grad_fn)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self
        axes = _normalize_axes(axis, src.data.ndim)
        data = src.data.sum(axis=axes, keepdims=keepdims)

        def grad_fn(g):
            gg = g
            if not keepdims and axes is not None:
                for ax in axes:
                    gg = np.expand_dims(gg, ax)
            _accumulate(src, np.broadcast_to(gg, src.data.shape))

        return _op(_as_array(data), (src,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        src = self
        axes = _normalize_axes(axis, src.data.ndim)
        data = src.data.mean(axis=axes, keepdims=keepdims)
        if axes is None:
            count = src.data.size
        else:
            count = int(np.prod([src.data.shape[ax] for ax in axes]))

        def grad_fn(g):
            gg = g
            if not keepdims and axes is not None:
                for ax in axes:
                    gg = np.expand_dims(gg, ax)
            _accumulate(src, np.broadcast_to(gg, src.data.shape) / count)

        return _op(_as_array(data), (src,), grad_fn)

    # ------------------------------------------------------------------
    # elementwise

    def exp(self) -> "Tensor":
        src = self
        y = np.exp(src.data)

        def grad_fn(g):
            _accumulate(src, g * y)

        return _op(y, (src,), grad_fn)

    def log(self) -> "Tensor":
        src = self
        if np.any(src.data <= 0.0):
            raise DomainError("log needs strictly positive inputs; clamp first")

        def grad_fn(g):
            _accumulate(src, g / src.data)

        return _op(np.log(src.data), (src,), grad_fn)

    def sqrt(self) -> "Tensor":
        src = self
        if np.any(src.data < 0.0):
            raise DomainError("sqrt needs non-negative inputs; clamp first")
        y = np.sqrt(src.data)

        def grad_fn(g):
            gx = np.zeros_like(y)
            # subgradient 0 at the origin so clamped-to-zero inputs stay finite
            np.divide(g, 2.0 * y, out=gx, where=y > 0.0)
            _accumulate(src, gx)

        return _op(y, (src,), grad_fn)

    def square(self) -> "Tensor":
        src = self

        def grad_fn(g):
            _accumulate(src, g * 2.0 * src.data)

        return _op(src.data * src.data, (src,), grad_fn)

    def sigmoid(self) -> "Tensor":
        src = self
        x = src.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)

        def grad_fn(g):
            _accumulate(src, g * y * (1.0 - y))

        return _op(y, (src,), grad_fn)

    def clamp_min(self, bound: float) -> "Tensor":
        src = self
        mask = src.data > bound

        def grad_fn(g):
            _accumulate(src, g * mask)

        return _op(np.maximum(src.data, bound), (src,), grad_fn)

    def softmax_rows(self) -> "Tensor":
        """Row-wise softmax of a 2-d tensor; rows sum to 1."""
        src = self
        if src.data.ndim != 2:
            raise ShapeError(f"softmax_rows needs a 2-d tensor, got shape {src.shape}")
        shifted = src.data - src.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def grad_fn(g):
            inner = (g * y).sum(axis=1, keepdims=True)
            _accumulate(src, (g - inner) * y)

        return _op(y, (src,), grad_fn)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _op(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _accumulate(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), parent.data.shape)
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data)
    parent.grad += grad


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.concatenate(([0], np.cumsum(sizes)))

    def grad_fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            _accumulate(t, g[tuple(index)])

    return _op(data, tuple(ts), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _coerce(a).matmul(b)


def softmax_rows(x: Tensor) -> Tensor:
    return _coerce(x).softmax_rows()


def zero_grads(params) -> None:
    """Clear accumulated gradients on an iterable (or dict) of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for p in values:
        p.grad = None
