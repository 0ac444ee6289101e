"""Parameter containers and layers built on :mod:`mtdgpt.numerics.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DiffArray


class Module:
    """Minimal parameter tree.

    Attributes that are :class:`DiffArray` with ``requires_grad`` set, other
    modules, or lists of modules are discovered by :meth:`named_parameters`
    in attribute definition order, which keeps checkpoint layout stable.
    """

    training: bool = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffArray]]:
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, DiffArray) and attr.requires_grad:
                yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(full + ".")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.value = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for attr in vars(self).values():
            if isinstance(attr, Module):
                attr.train(mode)
            elif isinstance(attr, (list, tuple)):
                for item in attr:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


def param(value: np.ndarray) -> DiffArray:
    return DiffArray(value, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(n_in) if std is None else std
        self.weight = param(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: DiffArray) -> DiffArray:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: DiffArray) -> DiffArray:
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Stack of linear layers with tanh between (and optionally after) them."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, final_activation: bool = True):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.final_activation = final_activation

    def __call__(self, x: DiffArray) -> DiffArray:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = T.tanh(x)
        return x


def masked_attention(q: DiffArray, k: DiffArray, v: DiffArray, mask: np.ndarray) -> DiffArray:
    """Scaled dot-product attention over the last two axes.

    ``mask`` broadcasts to ``(..., T_q, T_k)``; False entries are excluded.
    Every query row must keep at least one key.
    """
    if q.shape[-1] == 0 or q.shape[-2] == 0 or k.shape[-2] == 0:
        raise ValueError(f"masked_attention: empty input, q shape {q.shape}, k shape {k.shape}")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"masked_attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(T.masked_fill(scores, mask), axis=-1)
    return T.matmul(weights, v)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def split_heads(x: DiffArray, n_heads: int) -> DiffArray:
    *lead, n, d = x.shape
    return T.transpose(T.reshape(x, (*lead, n, n_heads, d // n_heads)), _head_axes(len(lead)))


def merge_heads(x: DiffArray) -> DiffArray:
    *lead, h, n, dh = x.shape
    return T.reshape(T.transpose(x, _head_axes(len(lead))), (*lead, n, h * dh))


def _head_axes(n_lead: int) -> tuple[int, ...]:
    # swaps the sequence and head axes: (..., n, h, d) <-> (..., h, n, d)
    lead = tuple(range(n_lead))
    return (*lead, n_lead + 1, n_lead, n_lead + 2)


def cross_entropy(logits: DiffArray, targets, weights=None) -> DiffArray:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    ``logits`` has shape ``(..., A)``; ``targets`` the leading shape.  The
    optional ``weights`` (same shape as ``targets``) are 0/1 padding masks.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets shape {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"cross_entropy: target index out of range for {n_classes} classes")
    nll = -T.take_last(T.log_softmax(logits, axis=-1), targets)
    if weights is None:
        return T.mean(nll)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: every position is masked")
    return T.scale(T.sum_(T.mul(nll, w)), 1.0 / total)
