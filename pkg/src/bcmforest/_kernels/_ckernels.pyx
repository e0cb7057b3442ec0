# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner-loop kernels.

Mirrors ``numpy_backend`` exactly: same reduction order (ascending row
index), same elementwise operation order, so chains are bit-identical
across backends.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

name = "c"


def route_rows(int[::1] var, double[::1] cut, int[::1] left, int[::1] right,
               double[:, ::1] XT):
    cdef Py_ssize_t n = XT.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] out = out_arr
    cdef Py_ssize_t i
    cdef int node, v
    for i in range(n):
        node = 0
        v = var[0]
        while v >= 0:
            if XT[v, i] <= cut[node]:
                node = left[node]
            else:
                node = right[node]
            v = var[node]
        out[i] = node
    return out_arr


def leaf_stats(int[::1] leaf_idx, double[::1] r, double[::1] s, int n_slots):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sr_arr = np.zeros(n_slots)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s2_arr = np.zeros(n_slots)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] cnt_arr = np.zeros(n_slots, dtype=np.int64)
    cdef double[::1] sr = sr_arr
    cdef double[::1] s2 = s2_arr
    cdef long long[::1] cnt = cnt_arr
    cdef Py_ssize_t i, n = leaf_idx.shape[0]
    cdef int b
    cdef double sv
    for i in range(n):
        b = leaf_idx[i]
        sv = s[i]
        sr[b] += sv * r[i]
        s2[b] += sv * sv
        cnt[b] += 1
    return sr_arr, s2_arr, cnt_arr


def rows_where(int[::1] leaf_idx, int slot):
    cdef Py_ssize_t i, n = leaf_idx.shape[0], k = 0
    cdef cnp.ndarray[cnp.int32_t, ndim=1] buf_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] buf = buf_arr
    for i in range(n):
        if leaf_idx[i] == slot:
            buf[k] = <int> i
            k += 1
    return buf_arr[:k].copy()


def rows_where2(int[::1] leaf_idx, int slot_a, int slot_b):
    cdef Py_ssize_t i, n = leaf_idx.shape[0], k = 0
    cdef cnp.ndarray[cnp.int32_t, ndim=1] rows_arr = np.empty(n, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] bins_arr = np.empty(n, dtype=np.int32)
    cdef int[::1] rows = rows_arr
    cdef int[::1] bins = bins_arr
    cdef int v
    for i in range(n):
        v = leaf_idx[i]
        if v == slot_a:
            rows[k] = <int> i
            bins[k] = 0
            k += 1
        elif v == slot_b:
            rows[k] = <int> i
            bins[k] = 1
            k += 1
    return rows_arr[:k].copy(), bins_arr[:k].copy()


def split_stats(double[::1] xcol, int[::1] rows, double cut,
                double[::1] r, double[::1] s):
    cdef double sr0 = 0.0, s20 = 0.0, sr1 = 0.0, s21 = 0.0, sv
    cdef long long n0 = 0, n1 = 0
    cdef Py_ssize_t k, m = rows.shape[0]
    cdef int i
    for k in range(m):
        i = rows[k]
        sv = s[i]
        if xcol[i] > cut:
            sr1 += sv * r[i]
            s21 += sv * sv
            n1 += 1
        else:
            sr0 += sv * r[i]
            s20 += sv * sv
            n0 += 1
    return sr0, s20, n0, sr1, s21, n1


def paired_stats(int[::1] bins, int[::1] rows, double[::1] r, double[::1] s):
    cdef double sr0 = 0.0, s20 = 0.0, sr1 = 0.0, s21 = 0.0, sv
    cdef long long n0 = 0, n1 = 0
    cdef Py_ssize_t k, m = rows.shape[0]
    cdef int i
    for k in range(m):
        i = rows[k]
        sv = s[i]
        if bins[k] == 0:
            sr0 += sv * r[i]
            s20 += sv * sv
            n0 += 1
        else:
            sr1 += sv * r[i]
            s21 += sv * sv
            n1 += 1
    return sr0, s20, n0, sr1, s21, n1


def partial_residual(double[::1] y, double[::1] s, double[::1] full_fit,
                     double[::1] vals, int[::1] leaf_idx):
    cdef Py_ssize_t i, n = y.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    for i in range(n):
        out[i] = y[i] - s[i] * (full_fit[i] - vals[leaf_idx[i]])
    return out_arr


def tree_residual(double[::1] y, double[::1] s, double[::1] full_fit,
                  double[::1] vals, int[::1] leaf_idx):
    cdef Py_ssize_t i, n = y.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] resid_arr = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fit_arr = np.empty(n)
    cdef double[::1] resid = resid_arr
    cdef double[::1] fit = fit_arr
    cdef double f
    for i in range(n):
        f = vals[leaf_idx[i]]
        fit[i] = f
        resid[i] = y[i] - s[i] * (full_fit[i] - f)
    return resid_arr, fit_arr


def distinct_sorted(double[::1] xcol, int[::1] rows):
    cdef Py_ssize_t k, m = rows.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] buf_arr = np.empty(m)
    cdef double[::1] buf = buf_arr
    if m == 0:
        return buf_arr
    for k in range(m):
        buf[k] = xcol[rows[k]]
    buf_arr.sort()
    cdef Py_ssize_t out = 0
    for k in range(1, m):
        if buf[k] != buf[out]:
            out += 1
            buf[out] = buf[k]
    return buf_arr[:out + 1].copy()


def apply_fit_delta(double[::1] full_fit, double[::1] vals, int[::1] leaf_idx,
                    double[::1] old_fit):
    cdef Py_ssize_t i, n = full_fit.shape[0]
    for i in range(n):
        full_fit[i] += vals[leaf_idx[i]] - old_fit[i]


def accumulate_fit(double[::1] fit, double[::1] vals, int[::1] leaf_idx):
    cdef Py_ssize_t i, n = fit.shape[0]
    for i in range(n):
        fit[i] += vals[leaf_idx[i]]


def assign_split(int[::1] leaf_idx, int[::1] rows, int[::1] bins,
                 int slot_left, int slot_right):
    cdef Py_ssize_t k, m = rows.shape[0]
    for k in range(m):
        if bins[k] == 0:
            leaf_idx[rows[k]] = slot_left
        else:
            leaf_idx[rows[k]] = slot_right


def assign_fill(int[::1] leaf_idx, int[::1] rows, int slot):
    cdef Py_ssize_t k, m = rows.shape[0]
    for k in range(m):
        leaf_idx[rows[k]] = slot
