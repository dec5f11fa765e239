"""Benchmark the EL Newton kernel: numba versus numpy.

Run with ``python3 benchmarks/bench_el.py``.  Two measurements:

* the raw multiplier solve on random constraint matrices of several sizes,
  calling both kernels directly in one process;
* one Model 1 Monte Carlo cell end to end, in a subprocess per backend, since
  ``EDREL_BACKEND`` is read at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from edrel import _kernels
from edrel._backend import HAVE_NUMBA

CELL_SCRIPT = """
import time
from edrel import simlab as S
d = S.SimDesign(model=1, tau=(1, 0, 0, 0), k=2, reps={reps}, estimators=("EDR",))
t = time.perf_counter()
S.run_monte_carlo(d, jobs=1)
print(time.perf_counter() - t)
"""


def _problem(n, m, rng):
    G = rng.normal(size=(n, m))
    G[:, 0] += 0.3
    return G - G.mean(axis=0) + 0.05 * rng.normal(size=m)


def time_kernel(fn, problems, tol=1e-10, maxit=200, repeat=3):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        for G in problems:
            fn(G, tol, maxit)
        best = min(best, time.perf_counter() - t)
    return best / len(problems)


def bench_kernels(sizes, count, seed):
    rng = np.random.default_rng(seed)
    rows = []
    for n, m in sizes:
        problems = [_problem(n, m, rng) for _ in range(count)]
        t_np = time_kernel(_kernels.el_newton_numpy, problems)
        if HAVE_NUMBA:
            _kernels.el_newton_numba(problems[0], 1e-10, 200)  # compile outside the timer
            t_nb = time_kernel(_kernels.el_newton_numba, problems)
            lam_a = _kernels.el_newton_numpy(problems[0], 1e-10, 200)[0]
            lam_b = _kernels.el_newton_numba(problems[0], 1e-10, 200)[0]
            dev = float(np.max(np.abs(lam_a - lam_b)))
        else:
            t_nb, dev = float("nan"), float("nan")
        rows.append((n, m, t_np * 1e6, t_nb * 1e6, t_np / t_nb, dev))
    return rows


def bench_cell(backend, reps):
    env = dict(os.environ, EDREL_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", CELL_SCRIPT.format(reps=reps)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=200, help="problems per size")
    ap.add_argument("--reps", type=int, default=200, help="replicates of the end-to-end cell")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--skip-cell", action="store_true")
    args = ap.parse_args(argv)

    sizes = [(200, 2), (200, 4), (1000, 4), (5000, 6)]
    print(f"{'n':>6} {'m':>3} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'max|dlam|':>10}")
    for n, m, a, b, s, dev in bench_kernels(sizes, args.count, args.seed):
        print(f"{n:>6} {m:>3} {a:>10.1f} {b:>10.1f} {s:>8.2f} {dev:>10.2e}")
    if not args.skip_cell:
        print(f"\nModel 1 cell, EDR only, {args.reps} replicates (in-process time, includes loading the JIT cache):")
        for backend in ("numpy", "numba"):
            print(f"  {backend:>5}: {bench_cell(backend, args.reps):.2f} s")


if __name__ == "__main__":
    main()
