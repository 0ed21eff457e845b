# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Same API as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def locate_points(double[:, ::1] points, double[:, :, ::1] inv,
                  double[:, ::1] origin, double[:, ::1] box_lo,
                  double[:, ::1] box_hi, double tol):
    cdef Py_ssize_t p = points.shape[0]
    cdef Py_ssize_t k = inv.shape[0]
    cdef Py_ssize_t i, e, a
    cdef double x, y, z, dx, dy, dz, l1, l2, l3, l0
    elem_arr = np.full(p, -1, dtype=np.int64)
    bary_arr = np.zeros((p, 4), dtype=np.float64)
    cdef long long[::1] elem = elem_arr
    cdef double[:, ::1] bary = bary_arr
    for i in range(p):
        x = points[i, 0]
        y = points[i, 1]
        z = points[i, 2]
        for e in range(k):
            if (x < box_lo[e, 0] or x > box_hi[e, 0] or
                    y < box_lo[e, 1] or y > box_hi[e, 1] or
                    z < box_lo[e, 2] or z > box_hi[e, 2]):
                continue
            dx = x - origin[e, 0]
            dy = y - origin[e, 1]
            dz = z - origin[e, 2]
            l1 = inv[e, 0, 0] * dx + inv[e, 0, 1] * dy + inv[e, 0, 2] * dz
            if l1 < -tol:
                continue
            l2 = inv[e, 1, 0] * dx + inv[e, 1, 1] * dy + inv[e, 1, 2] * dz
            if l2 < -tol:
                continue
            l3 = inv[e, 2, 0] * dx + inv[e, 2, 1] * dy + inv[e, 2, 2] * dz
            if l3 < -tol:
                continue
            l0 = 1.0 - l1 - l2 - l3
            if l0 < -tol:
                continue
            elem[i] = e
            bary[i, 0] = l0
            bary[i, 1] = l1
            bary[i, 2] = l2
            bary[i, 3] = l3
            break
    return elem_arr, bary_arr


def radical_inverse_block(long long start, long long count, long long[::1] bases):
    cdef Py_ssize_t d = bases.shape[0]
    cdef Py_ssize_t i, j
    cdef long long n, b
    cdef double f, r
    out_arr = np.empty((count, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(count):
        for j in range(d):
            b = bases[j]
            n = start + i
            f = 1.0 / b
            r = 0.0
            while n > 0:
                r += f * (n % b)
                n //= b
                f /= b
            out[i, j] = r
    return out_arr


def first_crossing(double[:, ::1] series, double threshold):
    cdef Py_ssize_t n = series.shape[0]
    cdef Py_ssize_t m = series.shape[1]
    cdef Py_ssize_t i, k
    idx_arr = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] idx = idx_arr
    for i in range(n):
        for k in range(m):
            if series[i, k] >= threshold:
                idx[i] = k
                break
    return idx_arr


def element_stiffness(double[:, :, ::1] grads, double[::1] vol,
                      double[:, :, ::1] tensors):
    cdef Py_ssize_t k = grads.shape[0]
    cdef Py_ssize_t e, i, j, a, b
    cdef double s
    cdef double gg[4][3]
    out_arr = np.empty((k, 4, 4), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for e in range(k):
        # gg = grads @ G
        for i in range(4):
            for b in range(3):
                s = 0.0
                for a in range(3):
                    s += grads[e, i, a] * tensors[e, a, b]
                gg[i][b] = s
        for i in range(4):
            for j in range(i, 4):
                s = 0.0
                for b in range(3):
                    s += gg[i][b] * grads[e, j, b]
                s *= vol[e]
                out[e, i, j] = s
                out[e, j, i] = s
    return out_arr
