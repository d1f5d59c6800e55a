# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels; same contracts as ``_pykernels``."""
import numpy as np

from libc.math cimport erf, exp, sqrt, tanh, INFINITY

cdef double SQRT_2_OVER_PI = 0.7978845608028654
cdef double INV_SQRT_2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327
cdef double GELU_C = 0.044715


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double m, total
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        total = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - m)
            total += y[i, j]
        for j in range(n):
            y[i, j] /= total
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    cdef double dot
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] dx = out
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += y[i, j] * dy[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return out


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain, const double[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mean, var, d, r
    out = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(rows):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mean
            var += d * d
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            xhat[i, j] = (x[i, j] - mean) * r
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return out, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] dy, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t rows = dy.shape[0], n = dy.shape[1], i, j
    cdef double m1, m2, g
    dx_arr = np.empty((rows, n), dtype=np.float64)
    dgain_arr = np.zeros(n, dtype=np.float64)
    dbias_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            g = dy[i, j] * gain[j]
            m1 += g
            m2 += g * xhat[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            dx[i, j] = (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx_arr, dgain_arr, dbias_arr


def gelu_forward(x_in, bint approximate):
    x_arr = np.ascontiguousarray(x_in, dtype=np.float64)
    out = np.empty_like(x_arr)
    cdef const double[::1] x = x_arr.reshape(-1)
    cdef double[::1] y = out.reshape(-1)
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    if approximate:
        for i in range(n):
            v = x[i]
            y[i] = 0.5 * v * (1.0 + tanh(SQRT_2_OVER_PI * (v + GELU_C * v * v * v)))
    else:
        for i in range(n):
            v = x[i]
            y[i] = 0.5 * v * (1.0 + erf(v * INV_SQRT_2))
    return out


def gelu_backward(x_in, dy_in, bint approximate):
    x_arr = np.ascontiguousarray(x_in, dtype=np.float64)
    dy_arr = np.ascontiguousarray(dy_in, dtype=np.float64)
    out = np.empty_like(x_arr)
    cdef const double[::1] x = x_arr.reshape(-1)
    cdef const double[::1] dy = dy_arr.reshape(-1)
    cdef double[::1] dx = out.reshape(-1)
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t, dinner
    if approximate:
        for i in range(n):
            v = x[i]
            t = tanh(SQRT_2_OVER_PI * (v + GELU_C * v * v * v))
            dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
            dx[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    else:
        for i in range(n):
            v = x[i]
            dx[i] = dy[i] * (0.5 * (1.0 + erf(v * INV_SQRT_2)) + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out


def best_span(const double[::1] start_logits, const double[::1] end_logits,
              Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t max_answer_len):
    cdef Py_ssize_t i, j, stop, bi = -1, bj = -1
    cdef double best = -INFINITY, s
    if hi < lo or max_answer_len < 1:
        return best, -1, -1
    for i in range(lo, hi + 1):
        stop = i + max_answer_len - 1
        if stop > hi:
            stop = hi
        for j in range(i, stop + 1):
            s = start_logits[i] + end_logits[j]
            if bi < 0 or s > best:
                best = s
                bi = i
                bj = j
    return best, bi, bj
