"""Order-preserving map over independent jobs (episodes)."""

from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor


def default_workers() -> int:
    return os.cpu_count() or 1


def parallel_map(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, fanned out over processes when ``workers > 1``.

    Results come back in input order, so output never depends on scheduling.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
