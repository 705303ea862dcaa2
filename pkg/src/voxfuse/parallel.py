"""Deterministic chunked execution.

Work is split into fixed-size blocks whose boundaries do not depend on the
thread count, so results are bit-identical for any ``threads`` value.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def block_ranges(n: int, block: int) -> list[tuple[int, int]]:
    return [(s, min(s + block, n)) for s in range(0, n, block)]


def run_blocks(fn, n: int, block: int, threads: int = 1):
    """Call ``fn(start, stop)`` over fixed blocks, optionally on a pool."""
    ranges = block_ranges(n, block)
    if threads <= 1 or len(ranges) <= 1:
        for s, e in ranges:
            fn(s, e)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for f in [pool.submit(fn, s, e) for s, e in ranges]:
            f.result()
