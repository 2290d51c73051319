"""In-process rank abstraction.

A "rank" is a subdomain index. All distributed objects store one chunk per
rank inside a single process; communication phases of the MPI original become
plain data movement here. Per-rank work can optionally run on a thread pool,
but every reduction combines per-rank partial results in ascending rank
order, so the outcome never depends on the worker count or on scheduling.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

# Module-wide default worker count for map_ranks (None = run serially).
DEFAULT_WORKERS = None


def set_default_workers(workers):
    global DEFAULT_WORKERS
    DEFAULT_WORKERS = workers


def map_ranks(n_ranks, fn, workers=None):
    """Run fn(rank) for every rank, returning results as a rank-indexed list.

    With workers > 1 the calls run on a thread pool; results are still
    collected by rank index, so callers see the same ordering either way.
    """
    if workers is None:
        workers = DEFAULT_WORKERS
    if workers is None or workers <= 1 or n_ranks == 1:
        return [fn(r) for r in range(n_ranks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_ranks)))


def reduce_sum(partials):
    """Sum scalar per-rank partials in ascending rank order.

    Written as an explicit left fold: the summation order is part of the
    determinism contract, not an implementation accident.
    """
    total = 0.0
    for p in partials:
        total = total + p
    return total


def reduce_max(partials):
    out = partials[0]
    for p in partials[1:]:
        if p > out:
            out = p
    return out


def gather_global(n_global, index_sets, parts, dtype=np.float64):
    """Scatter per-rank value chunks into one global array (rank order)."""
    out = np.zeros(n_global, dtype=dtype)
    for idx, vals in zip(index_sets, parts):
        out[idx] = vals
    return out
