"""Deterministic work splitting.

Work items write disjoint output partitions of preallocated arrays, so the
result is bit-identical for any thread count; numpy releases the GIL for the
bulk of the arithmetic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def row_bands(height: int, parts: int) -> list[tuple[int, int]]:
    """Split [0, height) into at most `parts` contiguous non-empty bands."""
    parts = max(1, min(parts, height))
    edges = [round(k * height / parts) for k in range(parts + 1)]
    return [(edges[k], edges[k + 1]) for k in range(parts) if edges[k] < edges[k + 1]]


def run_partitioned(fn, partitions, threads: int = 1) -> None:
    """Run fn(partition) for every partition, possibly on a thread pool."""
    if threads <= 1:
        for p in partitions:
            fn(p)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fn, partitions))
