# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the kernels in kernels_py.py.

Single-pass loops over contiguous float64 buffers; avoids the temporary
arrays the numpy fallback allocates.  Signatures match kernels_py exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(cnp.ndarray x_arr):
    cdef double[::1] x = np.ascontiguousarray(x_arr).ravel()
    out_arr = np.empty_like(x_arr)
    cdef double[::1] out = out_arr.ravel()
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = 0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2))
    return out_arr


def gelu_bwd(cnp.ndarray x_arr, cnp.ndarray gy_arr):
    cdef double[::1] x = np.ascontiguousarray(x_arr).ravel()
    cdef double[::1] gy = np.ascontiguousarray(gy_arr).ravel()
    out_arr = np.empty_like(x_arr)
    cdef double[::1] out = out_arr.ravel()
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double cdf, phi
    for i in range(n):
        cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        phi = exp(-0.5 * x[i] * x[i]) * INV_SQRT_2PI
        out[i] = gy[i] * (cdf + x[i] * phi)
    return out_arr


def softmax_fwd(cnp.ndarray x_arr):
    cdef double[:, ::1] x = np.ascontiguousarray(x_arr)
    out_arr = np.empty_like(x_arr)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    cdef double m, s
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(c):
            out[i, j] /= s
    return out_arr


def softmax_bwd(cnp.ndarray y_arr, cnp.ndarray gy_arr):
    cdef double[:, ::1] y = np.ascontiguousarray(y_arr)
    cdef double[:, ::1] gy = np.ascontiguousarray(gy_arr)
    out_arr = np.empty_like(y_arr)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r = y.shape[0], c = y.shape[1]
    cdef double dot
    for i in range(r):
        dot = 0.0
        for j in range(c):
            dot += y[i, j] * gy[i, j]
        for j in range(c):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out_arr


def layernorm_fwd(cnp.ndarray x_arr, cnp.ndarray gain_arr, cnp.ndarray bias_arr,
                  double eps):
    cdef double[:, ::1] x = np.ascontiguousarray(x_arr)
    cdef double[::1] gain = np.ascontiguousarray(gain_arr)
    cdef double[::1] bias = np.ascontiguousarray(bias_arr)
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    y_arr = np.empty_like(x_arr)
    mu_arr = np.empty(r, dtype=np.float64)
    rstd_arr = np.empty(r, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mu = mu_arr
    cdef double[::1] rstd = rstd_arr
    cdef double s, v, d
    for i in range(r):
        s = 0.0
        for j in range(c):
            s += x[i, j]
        mu[i] = s / c
        v = 0.0
        for j in range(c):
            d = x[i, j] - mu[i]
            v += d * d
        rstd[i] = 1.0 / sqrt(v / c + eps)
        for j in range(c):
            y[i, j] = (x[i, j] - mu[i]) * rstd[i] * gain[j] + bias[j]
    return y_arr, mu_arr, rstd_arr


def layernorm_bwd(cnp.ndarray x_arr, cnp.ndarray gain_arr, cnp.ndarray mu_arr,
                  cnp.ndarray rstd_arr, cnp.ndarray gy_arr):
    cdef double[:, ::1] x = np.ascontiguousarray(x_arr)
    cdef double[::1] gain = np.ascontiguousarray(gain_arr)
    cdef double[::1] mu = np.ascontiguousarray(mu_arr)
    cdef double[::1] rstd = np.ascontiguousarray(rstd_arr)
    cdef double[:, ::1] gy = np.ascontiguousarray(gy_arr)
    cdef Py_ssize_t i, j, r = x.shape[0], c = x.shape[1]
    gx_arr = np.empty_like(x_arr)
    ggain_arr = np.zeros(c, dtype=np.float64)
    gbias_arr = np.zeros(c, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef double xhat, gxh, m1, m2
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            xhat = (x[i, j] - mu[i]) * rstd[i]
            gxh = gy[i, j] * gain[j]
            m1 += gxh
            m2 += gxh * xhat
            ggain[j] += gy[i, j] * xhat
            gbias[j] += gy[i, j]
        m1 /= c
        m2 /= c
        for j in range(c):
            xhat = (x[i, j] - mu[i]) * rstd[i]
            gx[i, j] = rstd[i] * (gy[i, j] * gain[j] - m1 - xhat * m2)
    return gx_arr, ggain_arr, gbias_arr
