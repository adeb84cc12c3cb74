"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--n 20] [--m 5] [--r 40] [--repeat 3]
"""
from __future__ import annotations

import argparse
import math
import time

import numpy as np

from rit import _fallback

try:
    from rit import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        started = time.perf_counter()
        fn()
        times.append(time.perf_counter() - started)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=20, help="universe size")
    ap.add_argument("--m", type=int, default=5, help="collection size")
    ap.add_argument("--r", type=int, default=40, help="collections kept")
    ap.add_argument("--rows", type=int, default=200_000, help="score rows for the variance kernel")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    upper = np.triu(rng.random((args.n, args.n)), 1)
    dist = upper + upper.T
    scores = rng.normal(size=(args.rows, 5))

    cases = [
        (f"top_collections n={args.n} m={args.m} ({math.comb(args.n, args.m)} subsets)",
         lambda mod: mod.top_collections(dist, args.m, args.r)),
        (f"variance_rows {args.rows}x5", lambda mod: mod.variance_rows(scores, True)),
    ]
    print(f"{'kernel':<48} {'python':>10} {'cython':>10} {'speedup':>8}")
    for name, run in cases:
        py = best_of(lambda: run(_fallback), args.repeat)
        if _kernels is None:
            print(f"{name:<48} {py:>9.3f}s {'n/a':>10} {'':>8}")
            continue
        cy = best_of(lambda: run(_kernels), args.repeat)
        a, b = run(_fallback), run(_kernels)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        flag = "" if same else "  MISMATCH"
        print(f"{name:<48} {py:>9.3f}s {cy:>9.3f}s {py / cy:>7.1f}x{flag}")


if __name__ == "__main__":
    main()
