"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DiffArray, NumericFault


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[DiffArray], grads: list[np.ndarray | None], state: AdamState) -> None:
    """Update ``params`` in place.  Missing gradients count as zero."""
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    grads = [np.zeros_like(p.value) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFault("adam_step", "gradient")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("Adam moments do not match parameter shapes")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: list[DiffArray], lr: float = 3e-4, max_grad_norm: float | None = None):
        self.params = params
        self.state = AdamState(lr=lr)
        self.max_grad_norm = max_grad_norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad``; returns the pre-clip grad norm."""
        grads = [p.grad for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None)))
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            factor = self.max_grad_norm / (norm + 1e-12)
            grads = [None if g is None else g * factor for g in grads]
        adam_step(self.params, grads, self.state)
        return norm
