"""Seeded random streams and a deterministic parallel map.

All randomness in emdynamics flows through NumPy's ``PCG64`` bit generator
(128-bit state, 64-bit output) wrapped in :class:`numpy.random.Generator`.
Per-probe streams are keyed by ``(seed, index)`` so sampled results do not
depend on execution order or on the number of worker threads.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """Top-level generator for a command or a synthetic dataset."""
    return np.random.Generator(np.random.PCG64(seed))


def probe_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for a single probe, derived only from ``(seed, *keys)``.

    The keys are a probe index, optionally preceded by a stream number so
    that different sampling stages of one call never share draws.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)]))
    )


def parallel_map(
    fn: Callable[[T], R], items: Sequence[T], n_workers: int = 1
) -> List[R]:
    """Apply ``fn`` to every item and return results in input order.

    Parameters
    ----------
    fn : callable
        Pure function of a single work item.
    items : sequence
        Work items; typically probe indices or initial states.
    n_workers : int, default=1
        Thread count. ``1`` runs inline, which keeps tracebacks simple.

    Returns
    -------
    list
        ``[fn(item) for item in items]`` regardless of scheduling.
    """
    if n_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items))
