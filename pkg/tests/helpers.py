"""Independent checking routines shared by the test modules."""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (x is modified and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise discrepancy relative to the gradient's scale."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(build, params, h: float = 1e-4) -> float:
    """Compare backprop with finite differences for every DiffArray in ``params``.

    ``build()`` must return a scalar DiffArray computed from ``params``.  The
    error is relative to the largest gradient entry over all parameters, so a
    parameter whose true gradient is exactly zero (e.g. an attention key bias,
    which shifts every score equally) is judged against the model's gradient
    scale rather than against round-off.
    """
    for p in params:
        p.grad = None
    out = build()
    out.backward()
    analytic, numeric = [], []
    for p in params:
        analytic.append((np.zeros_like(p.value) if p.grad is None else p.grad).ravel())
        numeric.append(numeric_grad(lambda: float(build().value), p.value, h).ravel())
    return max_rel_error(np.concatenate(analytic), np.concatenate(numeric))


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, ok: bool | None, detail: str) -> None:
    """Log one acceptance verdict (``None`` = soft warning) for the terminal summary."""
    verdict = {True: "PASS", False: "FAIL", None: "WARN"}[ok]
    line = f"criterion {criterion}: {verdict}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
