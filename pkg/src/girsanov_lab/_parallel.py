"""Order-preserving chunked execution.

Chunk boundaries depend only on the problem size, never on the worker count,
and results are concatenated in chunk order, so reductions downstream see the
same arrays regardless of parallelism.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

WORKERS_ENV = "GIRSANOV_LAB_WORKERS"
_FLOATS_PER_CHUNK = 1 << 22


def worker_count(workers=None) -> int:
    if workers is None:
        workers = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(workers)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {workers!r}") from None
    return max(1, workers)


def default_chunk_size(n_paths: int, n_nodes: int, width: int) -> int:
    return int(max(1, min(n_paths, _FLOATS_PER_CHUNK // max(1, n_nodes * width))))


def chunk_bounds(n_paths: int, chunk_size: int):
    return [(lo, min(lo + chunk_size, n_paths)) for lo in range(0, n_paths, chunk_size)]


def map_chunks(fn, n_paths: int, chunk_size: int, workers=None) -> dict:
    """Run ``fn(lo, hi) -> dict of arrays`` over path chunks and concatenate."""
    bounds = chunk_bounds(n_paths, chunk_size)
    workers = worker_count(workers)
    if workers == 1 or len(bounds) == 1:
        parts = [fn(lo, hi) for lo, hi in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: fn(*b), bounds))
    return {key: np.concatenate([p[key] for p in parts], axis=0) for key in parts[0]}
