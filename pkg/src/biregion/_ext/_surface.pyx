# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled surface-distance kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def boundary_mask(const unsigned char[:, ::1] fg):
    """Foreground pixels with a 4-connected background neighbour or on the image edge."""
    cdef Py_ssize_t h = fg.shape[0], w = fg.shape[1], i, j
    out = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    for i in range(h):
        for j in range(w):
            if not fg[i, j]:
                continue
            if (i == 0 or j == 0 or i == h - 1 or j == w - 1
                    or not fg[i - 1, j] or not fg[i + 1, j]
                    or not fg[i, j - 1] or not fg[i, j + 1]):
                o[i, j] = 1
    return out


def directed_distances(const cnp.int64_t[:, ::1] a, const cnp.int64_t[:, ::1] b):
    """For each point of ``a``, Euclidean distance to the nearest point of ``b``."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, k
    cdef cnp.int64_t best, d, dy, dx, ay, ax
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    if m == 0:
        out.fill(np.inf)
        return out
    for i in range(n):
        ay = a[i, 0]
        ax = a[i, 1]
        best = -1
        for k in range(m):
            dy = ay - b[k, 0]
            dx = ax - b[k, 1]
            d = dy * dy + dx * dx
            if best < 0 or d < best:
                best = d
                if best == 0:
                    break
        o[i] = sqrt(<double>best)
    return out


def overlap_counts(const cnp.int64_t[:, ::1] pred, const cnp.int64_t[:, ::1] gt, int num_classes):
    """Per-class |A|, |B| and |A & B| for two label maps in one pass."""
    cdef Py_ssize_t h = pred.shape[0], w = pred.shape[1], i, j
    cdef cnp.int64_t p, g
    out = np.zeros((num_classes, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    for i in range(h):
        for j in range(w):
            p = pred[i, j]
            g = gt[i, j]
            if 0 <= p < num_classes:
                o[p, 0] += 1
            if 0 <= g < num_classes:
                o[g, 1] += 1
            if p == g and 0 <= p < num_classes:
                o[p, 2] += 1
    return out
