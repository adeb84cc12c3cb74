# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: collection ranking and batched multi-concept variance.

Both routines must stay bit-compatible with ``_fallback``: sums run in the
same left-to-right order and no fast-math flags are used.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline bint _worse(double t1, long long s1, double t2, long long s2) nogil:
    # lower total is worse; equal totals: later ordinal is worse
    if t1 != t2:
        return t1 < t2
    return s1 > s2


cdef void _sift_down(double* tot, long long* seq, long long* slot,
                     Py_ssize_t size, Py_ssize_t pos) nogil:
    cdef Py_ssize_t child, best
    cdef double tt
    cdef long long ts, tl
    while True:
        child = 2 * pos + 1
        if child >= size:
            return
        best = child
        if child + 1 < size and _worse(tot[child + 1], seq[child + 1], tot[child], seq[child]):
            best = child + 1
        if _worse(tot[best], seq[best], tot[pos], seq[pos]):
            tt = tot[pos]; tot[pos] = tot[best]; tot[best] = tt
            ts = seq[pos]; seq[pos] = seq[best]; seq[best] = ts
            tl = slot[pos]; slot[pos] = slot[best]; slot[best] = tl
            pos = best
        else:
            return


cdef void _sift_up(double* tot, long long* seq, long long* slot, Py_ssize_t pos) nogil:
    cdef Py_ssize_t parent
    cdef double tt
    cdef long long ts, tl
    while pos > 0:
        parent = (pos - 1) // 2
        if _worse(tot[pos], seq[pos], tot[parent], seq[parent]):
            tt = tot[pos]; tot[pos] = tot[parent]; tot[parent] = tt
            ts = seq[pos]; seq[pos] = seq[parent]; seq[parent] = ts
            tl = slot[pos]; slot[pos] = slot[parent]; slot[parent] = tl
            pos = parent
        else:
            return


def top_collections(dist, int m, Py_ssize_t r):
    """Best ``r`` m-subsets of ``range(n)`` by summed pairwise distance.

    Returns ``(indices, totals)`` ordered by descending total; equal totals
    keep lexicographic index order.
    """
    cdef double[:, ::1] d = np.ascontiguousarray(dist, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    if r < 0:
        raise ValueError("r must be nonnegative")
    rows = np.zeros((r, m), dtype=np.int64)
    cdef long long[:, ::1] store = rows
    heap_tot_arr = np.zeros(r, dtype=np.float64)
    heap_seq_arr = np.zeros(r, dtype=np.int64)
    heap_slot_arr = np.arange(r, dtype=np.int64)
    cdef double[::1] heap_tot = heap_tot_arr
    cdef long long[::1] heap_seq = heap_seq_arr
    cdef long long[::1] heap_slot = heap_slot_arr
    idx_arr = np.arange(m, dtype=np.int64)
    cdef long long[::1] idx = idx_arr
    cdef Py_ssize_t size = 0, a, b, i
    cdef long long ordinal = 0, s
    cdef double total
    if r == 0:
        return rows, heap_tot_arr
    with nogil:
        while True:
            total = 0.0
            for a in range(m):
                for b in range(a + 1, m):
                    total = total + d[idx[a], idx[b]]
            if size < r:
                heap_tot[size] = total
                heap_seq[size] = ordinal
                s = heap_slot[size]
                for a in range(m):
                    store[s, a] = idx[a]
                size += 1
                _sift_up(&heap_tot[0], &heap_seq[0], &heap_slot[0], size - 1)
            elif _worse(heap_tot[0], heap_seq[0], total, ordinal):
                heap_tot[0] = total
                heap_seq[0] = ordinal
                s = heap_slot[0]
                for a in range(m):
                    store[s, a] = idx[a]
                _sift_down(&heap_tot[0], &heap_seq[0], &heap_slot[0], size, 0)
            ordinal += 1
            # next combination in lexicographic order
            i = m - 1
            while i >= 0 and idx[i] == i + n - m:
                i -= 1
            if i < 0:
                break
            idx[i] += 1
            for a in range(i + 1, m):
                idx[a] = idx[a - 1] + 1
    order = np.lexsort((heap_seq_arr[:size], -heap_tot_arr[:size]))
    slots = heap_slot_arr[:size][order]
    return rows[slots], heap_tot_arr[:size][order]


def variance_rows(scores, bint sqrt_norm=True):
    """Multi-concept variance of every row of a 2-D score array."""
    cdef double[:, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t rows = s.shape[0], n = s.shape[1], i, j
    if n < 2:
        raise ValueError("variance needs at least two scores per row")
    out_arr = np.empty(rows, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double mean, ss, dev, norm
    norm = sqrt(<double>n) if sqrt_norm else <double>n
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean = mean + s[i, j]
            mean = mean / n
            ss = 0.0
            for j in range(n):
                dev = s[i, j] - mean
                ss = ss + dev * dev
            out[i] = ss / norm
    return out_arr
