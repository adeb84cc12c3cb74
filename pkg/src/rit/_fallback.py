"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import heapq
import itertools
import math

import numpy as np


def top_collections(dist, m: int, r: int):
    rows = np.asarray(dist, dtype=np.float64).tolist()
    n = len(rows)
    if m < 1 or m > n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    if r < 0:
        raise ValueError("r must be nonnegative")

    def scored():
        for ordinal, combo in enumerate(itertools.combinations(range(n), m)):
            total = 0.0
            for a in range(m):
                row = rows[combo[a]]
                for b in range(a + 1, m):
                    total = total + row[combo[b]]
            yield total, ordinal, combo

    best = heapq.nsmallest(r, scored(), key=lambda item: (-item[0], item[1]))
    indices = np.array([combo for _, _, combo in best], dtype=np.int64).reshape(len(best), m)
    totals = np.array([total for total, _, _ in best], dtype=np.float64)
    return indices, totals


def variance_rows(scores, sqrt_norm: bool = True):
    data = np.asarray(scores, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError("variance needs at least two scores per row")
    n = data.shape[1]
    norm = math.sqrt(n) if sqrt_norm else float(n)
    out = np.empty(data.shape[0], dtype=np.float64)
    for i, row in enumerate(data.tolist()):
        mean = 0.0
        for x in row:
            mean = mean + x
        mean = mean / n
        ss = 0.0
        for x in row:
            dev = x - mean
            ss = ss + dev * dev
        out[i] = ss / norm
    return out
