"""Deterministic fan-out of independent instances across worker threads.

Results are merged by instance index, so the output never depends on the
thread count.  ``LNLAB_THREADS`` caps the pool size; 1 disables threading.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    env = os.environ.get("LNLAB_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"LNLAB_THREADS={env!r} is not an integer") from exc
        return max(1, n)
    return min(8, os.cpu_count() or 1)


def map_indexed(fn, count: int, threads: int | None = None) -> list:
    """[fn(0), ..., fn(count-1)], evaluated concurrently but merged in order."""
    workers = thread_count() if threads is None else max(1, threads)
    if workers == 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))
