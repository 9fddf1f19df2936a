"""Order-preserving thread map; the compiled kernels release the GIL."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def thread_map(fn, items, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
