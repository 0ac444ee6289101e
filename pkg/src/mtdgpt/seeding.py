"""Deterministic seed derivation shared by every stage."""

from __future__ import annotations

import numpy as np


def derive_seed(*keys: int) -> int:
    """Mix integer keys into a 32-bit seed (stable across platforms and runs)."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


def episode_seeds(base: int, n: int, stream: int = 0) -> list[int]:
    return [derive_seed(base, stream, k) for k in range(n)]
