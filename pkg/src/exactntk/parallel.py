"""Pair-level worker pool for Gram matrices.

Every entry is a pure function of its (i, j) pair and is written to a fixed
slot, so the result does not depend on the thread count or on scheduling.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def pairwise(pair_fn: Callable[[int, int], float], n_rows: int, n_cols: int | None = None,
             threads: int | None = None, symmetric: bool = True) -> np.ndarray:
    """Fill an ``n_rows x n_cols`` matrix with ``pair_fn(i, j)``.

    With ``symmetric=True`` only ``j >= i`` is evaluated and mirrored.
    """
    if n_cols is None:
        n_cols = n_rows
    if symmetric and n_rows != n_cols:
        raise ValueError("symmetric fill needs a square matrix")
    out = np.zeros((n_rows, n_cols))
    threads = threads or default_threads()

    def row(i):
        start = i if symmetric else 0
        return i, [pair_fn(i, j) for j in range(start, n_cols)]

    t0 = time.perf_counter()
    if threads == 1:
        rows = map(row, range(n_rows))
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        rows = pool.map(row, range(n_rows))
    try:
        for i, vals in rows:
            start = i if symmetric else 0
            out[i, start:] = vals
    finally:
        if threads != 1:
            pool.shutdown()
    if symmetric:
        iu = np.triu_indices(n_rows, 1)
        out[iu[1], iu[0]] = out[iu]
    pairs = n_rows * (n_rows + 1) // 2 if symmetric else n_rows * n_cols
    elapsed = time.perf_counter() - t0
    if pairs:
        log.info("computed %d kernel pairs in %.2fs (%.1f pairs/s, %d threads)",
                 pairs, elapsed, pairs / max(elapsed, 1e-9), threads)
    return out
