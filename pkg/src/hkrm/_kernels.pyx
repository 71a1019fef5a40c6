# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise kernels. Same contracts as ``hkrm._kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def pairwise_l1(f):
    cdef double[:, ::1] fv = np.ascontiguousarray(f, dtype=np.float64)
    cdef Py_ssize_t n = fv.shape[0], d = fv.shape[1], i, j, k
    out = np.empty((n, n, d), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef double x
    for i in range(n):
        for j in range(n):
            for k in range(d):
                x = fv[i, k] - fv[j, k]
                ov[i, j, k] = x if x >= 0 else -x
    return out


def pairwise_l1_pairs(f, ii, jj):
    cdef double[:, ::1] fv = np.ascontiguousarray(f, dtype=np.float64)
    cdef cnp.intp_t[::1] iv = np.ascontiguousarray(ii, dtype=np.intp)
    cdef cnp.intp_t[::1] jv = np.ascontiguousarray(jj, dtype=np.intp)
    cdef Py_ssize_t p = iv.shape[0], d = fv.shape[1], r, k, a, b
    out = np.empty((p, d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double x
    for r in range(p):
        a = iv[r]
        b = jv[r]
        for k in range(d):
            x = fv[a, k] - fv[b, k]
            ov[r, k] = x if x >= 0 else -x
    return out


def pairwise_l1_pairs_backward(f, ii, jj, grad):
    cdef double[:, ::1] fv = np.ascontiguousarray(f, dtype=np.float64)
    cdef cnp.intp_t[::1] iv = np.ascontiguousarray(ii, dtype=np.intp)
    cdef cnp.intp_t[::1] jv = np.ascontiguousarray(jj, dtype=np.intp)
    cdef double[:, ::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef Py_ssize_t p = iv.shape[0], d = fv.shape[1], r, k, a, b
    out = np.zeros((fv.shape[0], d), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double x, g
    for r in range(p):
        a = iv[r]
        b = jv[r]
        for k in range(d):
            x = fv[a, k] - fv[b, k]
            if x > 0:
                g = gv[r, k]
            elif x < 0:
                g = -gv[r, k]
            else:
                continue
            ov[a, k] += g
            ov[b, k] -= g
    return out


def row_normalize(raw, double eps):
    cdef double[:, ::1] rv = np.ascontiguousarray(raw, dtype=np.float64)
    cdef Py_ssize_t n = rv.shape[0], m = rv.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    sums = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double[::1] sv = sums
    cdef double s, x, denom
    for i in range(n):
        s = 0.0
        for j in range(m):
            x = rv[i, j]
            s += x if x > 0 else 0.0
        sv[i] = s
        denom = s + eps
        if denom > 0:
            # select-then-divide keeps the loop branch-free so it vectorizes
            for j in range(m):
                x = rv[i, j]
                ov[i, j] = (x if x > 0 else 0.0) / denom
        else:
            for j in range(m):
                ov[i, j] = 0.0
    return out, sums


def row_normalize_backward(raw, adj, sums, grad, double eps):
    cdef double[:, ::1] rv = np.ascontiguousarray(raw, dtype=np.float64)
    cdef double[:, ::1] av = np.ascontiguousarray(adj, dtype=np.float64)
    cdef double[::1] sv = np.ascontiguousarray(sums, dtype=np.float64)
    cdef double[:, ::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef Py_ssize_t n = rv.shape[0], m = rv.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double inner, denom
    for i in range(n):
        inner = 0.0
        for j in range(m):
            inner += gv[i, j] * av[i, j]
        denom = sv[i] + eps
        if denom > 0:
            for j in range(m):
                ov[i, j] = ((gv[i, j] - inner) if rv[i, j] > 0 else 0.0) / denom
        else:
            for j in range(m):
                ov[i, j] = 0.0
    return out
