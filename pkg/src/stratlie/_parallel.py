"""Deterministic thread-pool helpers.

Work is split into chunks whose boundaries depend only on the problem size,
never on the worker count, and results are collected in submission order.
Reductions done by callers over the returned list are therefore identical
for any value of ``STRATLIE_THREADS``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of worker threads, from ``STRATLIE_THREADS`` (default 1)."""
    raw = os.environ.get("STRATLIE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"STRATLIE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def chunk_bounds(n: int, size: int) -> list[tuple[int, int]]:
    size = max(1, int(size))
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map ``fn`` over ``items`` and return results in input order.

    BLAS is pinned to one thread inside the pool so that each chunk's
    floating-point reduction order is fixed.
    """
    items = list(items)
    workers = min(worker_count(), max(1, len(items)))
    with threadpool_limits(limits=1):
        if workers == 1:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
