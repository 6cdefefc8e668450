"""In-process parallel map over subintervals.

Results are always returned in index order, so outputs never depend on the
number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Callable, List, Optional, TypeVar

T = TypeVar("T")


def worker_count(requested: Optional[int] = None) -> int:
    """Worker count, capped by the ``PARAOPT_THREADS`` environment variable."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("PARAOPT_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@lru_cache(maxsize=None)
def _executor(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="paraopt")


def pmap(fn: Callable[[int], T], n: int, workers: Optional[int] = None) -> List[T]:
    workers = min(worker_count(workers), n)
    if workers <= 1:
        return [fn(i) for i in range(n)]
    return list(_executor(workers).map(fn, range(n)))
