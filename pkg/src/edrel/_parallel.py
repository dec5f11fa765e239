"""Replicate-level parallelism and per-replicate random streams."""
from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

_TASK = None


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, index)``; independent of scheduling."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _call(i):
    return _TASK(i)


def pmap(fn, items, jobs=1):
    """``[fn(i) for i in items]``, optionally over forked worker processes.

    ``fn`` need not be picklable: it is inherited by the forked workers.
    Results are returned in input order.
    """
    global _TASK
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) < 2 or "fork" not in mp.get_all_start_methods():
        return [fn(i) for i in items]
    _TASK = fn
    try:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items)), mp_context=mp.get_context("fork")) as ex:
            return list(ex.map(_call, items, chunksize=max(1, len(items) // (4 * jobs))))
    finally:
        _TASK = None
