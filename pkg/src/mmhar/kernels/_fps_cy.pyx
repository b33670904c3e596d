# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled greedy farthest point sampling loop."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def fps_greedy(double[:, ::1] pts, Py_ssize_t seed, Py_ssize_t m):
    cdef Py_ssize_t n = pts.shape[0]
    out_arr = np.empty(m, dtype=np.int64)
    mind_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t i, k, best
    cdef double dx, dy, dz, d, bestval

    out[0] = seed
    for i in range(n):
        dx = pts[i, 0] - pts[seed, 0]
        dy = pts[i, 1] - pts[seed, 1]
        dz = pts[i, 2] - pts[seed, 2]
        mind[i] = dx * dx + dy * dy + dz * dz

    for k in range(1, m):
        best = 0
        bestval = mind[0]
        for i in range(1, n):
            if mind[i] > bestval:
                bestval = mind[i]
                best = i
        out[k] = best
        for i in range(n):
            dx = pts[i, 0] - pts[best, 0]
            dy = pts[i, 1] - pts[best, 1]
            dz = pts[i, 2] - pts[best, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d

    return out_arr
