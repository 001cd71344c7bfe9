"""Order-preserving map over replicate indices, optionally across processes."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")


def resolve_jobs(n_jobs: Optional[int]) -> int:
    if n_jobs is None or n_jobs == 0:
        return 1
    if n_jobs < 0:
        return max(1, (os.cpu_count() or 1) + 1 + n_jobs)
    return n_jobs


def map_indexed(func: Callable[[int], T], indices: Iterable[int], n_jobs: Optional[int] = 1) -> List[T]:
    """``[func(i) for i in indices]``, computed by ``n_jobs`` worker processes.

    Results come back in index order, so reductions over them do not depend
    on scheduling. ``func`` must be picklable when ``n_jobs > 1``.
    """
    indices = list(indices)
    jobs = resolve_jobs(n_jobs)
    if jobs == 1 or len(indices) <= 1:
        return [func(i) for i in indices]
    chunk = max(1, len(indices) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, indices, chunksize=chunk))
