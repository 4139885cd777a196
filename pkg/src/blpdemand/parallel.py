"""Deterministic thread parallelism across markets.

Markets are split into contiguous blocks, one per worker. Each market's task
writes only into its own preallocated output slots and runs the exact same
instruction sequence it would run single-threaded, so results are bitwise
identical for every thread count. Any cross-market reduction happens after
the parallel region, in fixed market order.
"""

from __future__ import annotations

import atexit
from concurrent.futures import ThreadPoolExecutor

_pools: dict[int, ThreadPoolExecutor] = {}


def _get_pool(n_threads):
    pool = _pools.get(n_threads)
    if pool is None:
        pool = ThreadPoolExecutor(max_workers=n_threads)
        _pools[n_threads] = pool
    return pool


@atexit.register
def _shutdown_pools():
    for pool in _pools.values():
        pool.shutdown(wait=False)
    _pools.clear()


def market_map(task, n_markets, n_threads=1):
    """Run task(t) for t = 0..n_markets-1, optionally across threads.

    task must confine its writes to per-market slots. Exceptions propagate to
    the caller regardless of thread count.
    """
    if n_threads <= 1 or n_markets <= 1:
        for t in range(n_markets):
            task(t)
        return

    bounds = [(n_markets * w) // n_threads for w in range(n_threads + 1)]

    def run_block(w):
        for t in range(bounds[w], bounds[w + 1]):
            task(t)

    pool = _get_pool(n_threads)
    # list() re-raises the first worker exception in block order
    list(pool.map(run_block, range(n_threads)))
