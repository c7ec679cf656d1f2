# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled fast paths for the kernels in ``_numpy``.

Semantics match the numpy module exactly apart from float summation order;
both accumulate in float64.
"""

from libc.math cimport sqrt

import numpy as np

ZERO_CELL_SIMILARITY = -2.0


def laplacian_variance(gray):
    # Response where the kernel fits, zero along the border (flat image -> 0).
    cdef double[:, ::1] g = np.ascontiguousarray(gray, dtype=np.float64)
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1]
    if h == 0 or w == 0:
        raise ValueError("expected a non-empty 2-D array")
    cdef double s = 0.0, s2 = 0.0, r
    cdef Py_ssize_t y, x
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            r = g[y - 1, x] + g[y + 1, x] + g[y, x - 1] + g[y, x + 1] - 4.0 * g[y, x]
            s += r
            s2 += r * r
    cdef double n = <double> (h * w)
    cdef double mean = s / n
    return s2 / n - mean * mean


def cosine_best_cell(cells, query):
    cdef double[:, ::1] c = np.ascontiguousarray(cells, dtype=np.float64)
    cdef double[::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], dim = c.shape[1]
    cdef Py_ssize_t i, j
    cdef double qn = 0.0, dot, norm, sim
    cdef double best = -3.0
    cdef Py_ssize_t best_i = 0
    for j in range(dim):
        qn += q[j] * q[j]
    qn = sqrt(qn)
    for i in range(n):
        dot = 0.0
        norm = 0.0
        for j in range(dim):
            dot += c[i, j] * q[j]
            norm += c[i, j] * c[i, j]
        if norm > 0.0:
            sim = dot / (sqrt(norm) * qn)
        else:
            sim = ZERO_CELL_SIMILARITY
        if sim > best:
            best = sim
            best_i = i
    return best_i, best


def point_min_distances(points, sites):
    cdef double[:, ::1] pts = np.ascontiguousarray(
        np.asarray(points, dtype=np.float64).reshape(-1, 2))
    cdef double[:, ::1] s = np.ascontiguousarray(
        np.asarray(sites, dtype=np.float64).reshape(-1, 2))
    cdef Py_ssize_t m = pts.shape[0], k = s.shape[0]
    if k == 0:
        raise ValueError("empty site set")
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double dx, dy, d2, best
    for i in range(m):
        best = 1e300
        for j in range(k):
            dx = s[j, 0] - pts[i, 0]
            dy = s[j, 1] - pts[i, 1]
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
        out[i] = sqrt(best)
    return out_arr
