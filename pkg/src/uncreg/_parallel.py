from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads = None


def set_threads(n: int | None) -> None:
    global _threads
    if n is not None and n < 1:
        raise ValueError("threads must be >= 1")
    _threads = n


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get("UNCREG_THREADS")
    if env:
        return max(1, int(env))
    return 1


def ordered_map(fn, items):
    """Map ``fn`` over ``items`` with the configured worker cap; order preserved."""
    items = list(items)
    n = get_threads()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
