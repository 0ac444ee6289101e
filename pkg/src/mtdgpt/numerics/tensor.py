"""Reverse-mode differentiable arrays backed by numpy float64.

A :class:`DiffArray` wraps an ``ndarray`` and remembers the operation that
produced it.  Calling :meth:`DiffArray.backward` on a scalar walks the graph
once in reverse topological order and accumulates ``grad`` on every array
that requires it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9

_state = threading.local()


class NumericFault(FloatingPointError):
    """Raised when an operation produces a NaN or infinite value."""

    def __init__(self, op: str, what: str = "value"):
        super().__init__(f"non-finite {what} produced by op '{op}'")
        self.op = op


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class DiffArray:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"DiffArray(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> DiffArray:
        return DiffArray(self.value)

    # -------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.value.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.value)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node.requires_grad and not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericFault(node.op, "gradient")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _topological(root: DiffArray) -> list[DiffArray]:
    # iterative DFS; each node appended exactly once
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(value: np.ndarray, parents: Iterable[DiffArray], backward, op: str) -> DiffArray:
    if not np.all(np.isfinite(value)):
        raise NumericFault(op)
    parents = tuple(parents)
    out = DiffArray(value, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: DiffArray, b: DiffArray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise
def add(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast("add", a, b)
    return _make(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def div(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
        "div",
    )


def scale(a: DiffArray, c: float) -> DiffArray:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: DiffArray) -> DiffArray:
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def tanh(a: DiffArray) -> DiffArray:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: DiffArray) -> DiffArray:
    pos = a.value > 0
    return _make(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: DiffArray) -> DiffArray:
    """Tanh-approximated GELU, as in GPT-2."""
    x = a.value
    x2 = x * x  # x**3 via np.power is several times slower
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def square(a: DiffArray) -> DiffArray:
    return _make(a.value**2, (a,), lambda g: (2.0 * a.value * g,), "square")


def clip(a: DiffArray, lo: float, hi: float) -> DiffArray:
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast("minimum", a, b)
    pick_a = a.value <= b.value
    return _make(
        np.where(pick_a, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


# ----------------------------------------------------------------- reductions
def sum_(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: DiffArray, axis=None, keepdims: bool = False) -> DiffArray:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


# ------------------------------------------------------------------ structure
def reshape(a: DiffArray, shape) -> DiffArray:
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: DiffArray, axes=None) -> DiffArray:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: DiffArray) -> DiffArray:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def index(a: DiffArray, idx) -> DiffArray:
    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.value[idx]), (a,), backward, "index")


def concat(arrays: Sequence[DiffArray], axis: int = -1) -> DiffArray:
    arrays = [as_array(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    try:
        out = np.concatenate([x.value for x in arrays], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[x.shape for x in arrays]}") from None
    splits = np.cumsum(sizes)[:-1]
    return _make(out, arrays, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def embedding(table: DiffArray, indices) -> DiffArray:
    """Row lookup ``table[indices]``; gradients scatter-add into the table."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.value)
        np.add.at(full, indices, g)
        return (full,)

    return _make(table.value[indices], (table,), backward, "embedding")


def take_last(a: DiffArray, indices) -> DiffArray:
    """Pick ``a[..., indices]`` elementwise along the last axis."""
    indices = np.asarray(indices, dtype=np.int64)
    picked = np.take_along_axis(a.value, indices[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.value)
        np.put_along_axis(full, indices[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(picked, (a,), backward, "take_last")


# ---------------------------------------------------------------- linear algebra
def matmul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def _matmul_flat(a: DiffArray, b: DiffArray) -> DiffArray:
    # (..., n, k) @ (k, m) as one 2-D product; avoids a batched GEMM plus a reduction in backward
    lead = a.shape[:-1]
    a2 = a.value.reshape(-1, a.shape[-1])
    out = (a2 @ b.value).reshape(*lead, b.shape[-1])

    def backward(g):
        g2 = g.reshape(-1, b.shape[-1])
        ga = (g2 @ b.value.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ------------------------------------------------------------ normalisations
def softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: DiffArray, axis: int = -1) -> DiffArray:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layernorm(a: DiffArray, gamma: DiffArray, beta: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Normalise over the last axis, then apply an elementwise affine map."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value
    def backward(g):
        gx = None
        if a.requires_grad:
            gx_hat = g * gamma.value
            gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (a, gamma, beta), backward, "layernorm")


def dropout(a: DiffArray, rate: float, rng: np.random.Generator | None, training: bool) -> DiffArray:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: (g * keep,), "dropout")


def masked_fill(a: DiffArray, mask: np.ndarray, value: float = MASK_VALUE) -> DiffArray:
    """Replace entries where ``mask`` is False with ``value`` (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(mask, a.value, value), (a,), lambda g: (g * mask,), "masked_fill")
