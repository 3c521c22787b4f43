"""Compare the compiled and pure-Python pair-sum kernels.

Usage::

    python benchmarks/bench_kernels.py [--sizes 256 512 1024] [--repeat 3]

Each size is timed for the 1-d lag sums; ``--sizes-2d`` adds 2-d grids.
Both backends are checked against each other before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from brinkman_lab import _core, _fallback


def _best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(shape: tuple, repeat: int, rng: np.random.Generator) -> dict:
    rho = rng.random(shape)
    w = rng.random(shape)
    fast = _core.lag_sums(rho, w, 1.0, True)
    slow = _core.lag_sums(rho, w, 1.0, True, impl=_fallback)
    rel = float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow)))
    t_fast = _best_time(lambda: _core.lag_sums(rho, w, 1.0, True), repeat)
    t_slow = _best_time(lambda: _core.lag_sums(rho, w, 1.0, True, impl=_fallback), repeat)
    return {"shape": shape, "compiled": t_fast, "python": t_slow,
            "speedup": t_slow / t_fast, "max_rel_diff": rel}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="*", default=[256, 512, 1024])
    ap.add_argument("--sizes-2d", type=int, nargs="*", default=[16, 32])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=None)
    args = ap.parse_args(argv)
    if args.threads:
        _core.set_threads(args.threads)
    print(f"backend={_core.BACKEND} threads={_core.get_threads()}")
    if _core.BACKEND != "compiled":
        print("compiled extension not available; timings compare the fallback with itself")
    rng = np.random.default_rng(0)
    shapes = [(n,) for n in args.sizes] + [(n, n) for n in args.sizes_2d]
    print(f"{'shape':>12} {'compiled [s]':>13} {'python [s]':>11} {'speedup':>8} {'rel diff':>9}")
    for shape in shapes:
        r = bench(shape, args.repeat, rng)
        print(f"{'x'.join(map(str, shape)):>12} {r['compiled']:13.4g} {r['python']:11.4g} "
              f"{r['speedup']:8.1f} {r['max_rel_diff']:9.1e}")


if __name__ == "__main__":
    main()
