# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Signatures mirror ``panp._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, erf, log1p, sqrt, fabs, M_SQRT1_2

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_forward(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(m):
            y[i, j] /= s
    return out


def softmax_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, m))
    cdef double[:, ::1] gx = out
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def gelu_forward(x):
    cdef const double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xf.shape[0], i
    out = np.empty(n)
    cdef double[::1] y = out
    for i in range(n):
        y[i] = 0.5 * xf[i] * (1.0 + erf(xf[i] * M_SQRT1_2))
    return out.reshape(np.shape(x))


def gelu_backward(x, gy):
    cdef const double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef const double[::1] gf = np.ascontiguousarray(gy, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xf.shape[0], i
    cdef double v
    out = np.empty(n)
    cdef double[::1] g = out
    for i in range(n):
        v = xf[i]
        g[i] = gf[i] * (0.5 * (1.0 + erf(v * M_SQRT1_2)) + v * INV_SQRT_2PI * exp(-0.5 * v * v))
    return out.reshape(np.shape(x))


def softplus_forward(x):
    cdef const double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xf.shape[0], i
    cdef double v
    out = np.empty(n)
    cdef double[::1] y = out
    for i in range(n):
        v = xf[i]
        y[i] = (v if v > 0.0 else 0.0) + log1p(exp(-fabs(v)))
    return out.reshape(np.shape(x))


def softplus_backward(x, gy):
    cdef const double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef const double[::1] gf = np.ascontiguousarray(gy, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xf.shape[0], i
    cdef double e
    out = np.empty(n)
    cdef double[::1] g = out
    for i in range(n):
        e = exp(-fabs(xf[i]))
        if xf[i] >= 0.0:
            g[i] = gf[i] / (1.0 + e)
        else:
            g[i] = gf[i] * e / (1.0 + e)
    return out.reshape(np.shape(x))


def layer_norm_forward(const double[:, ::1] x, const double[::1] gain,
                       const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mean, var, r, c
    out_y = np.empty((n, m))
    out_xhat = np.empty((n, m))
    out_rstd = np.empty(n)
    cdef double[:, ::1] y = out_y
    cdef double[:, ::1] xhat = out_xhat
    cdef double[::1] rstd = out_rstd
    for i in range(n):
        mean = 0.0
        for j in range(m):
            mean += x[i, j]
        mean /= m
        var = 0.0
        for j in range(m):
            c = x[i, j] - mean
            var += c * c
        var /= m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            xhat[i, j] = (x[i, j] - mean) * r
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return out_y, out_xhat, out_rstd


def layer_norm_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], m = gy.shape[1], i, j
    cdef double s1, s2, gh
    out_gx = np.empty((n, m))
    out_ggain = np.zeros(m)
    out_gbias = np.zeros(m)
    cdef double[:, ::1] gx = out_gx
    cdef double[::1] ggain = out_ggain
    cdef double[::1] gbias = out_gbias
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            ggain[j] += gy[i, j] * xhat[i, j]
            gbias[j] += gy[i, j]
            gh = gy[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
        for j in range(m):
            gh = gy[i, j] * gain[j]
            gx[i, j] = rstd[i] / m * (m * gh - s1 - xhat[i, j] * s2)
    return out_gx, out_ggain, out_gbias


def attention_forward(const double[:, ::1] q, const double[:, ::1] k,
                      const double[:, ::1] v, int n_heads):
    cdef Py_ssize_t nq = q.shape[0], nk = k.shape[0], width = q.shape[1]
    cdef Py_ssize_t hd = width // n_heads
    cdef Py_ssize_t h, i, j, c, off
    cdef double scale = 1.0 / sqrt(<double>hd)
    cdef double s, mx, tot, acc
    out_arr = np.zeros((nq, width))
    w_arr = np.empty((n_heads, nq, nk))
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    for h in range(n_heads):
        off = h * hd
        for i in range(nq):
            mx = -1e308
            for j in range(nk):
                s = 0.0
                for c in range(hd):
                    s += q[i, off + c] * k[j, off + c]
                s *= scale
                w[h, i, j] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for j in range(nk):
                w[h, i, j] = exp(w[h, i, j] - mx)
                tot += w[h, i, j]
            for j in range(nk):
                w[h, i, j] /= tot
            for c in range(hd):
                acc = 0.0
                for j in range(nk):
                    acc += w[h, i, j] * v[j, off + c]
                out[i, off + c] = acc
    return out_arr, w_arr


def attention_backward(const double[:, ::1] q, const double[:, ::1] k,
                       const double[:, ::1] v, const double[:, :, ::1] w,
                       const double[:, ::1] gout, int n_heads):
    cdef Py_ssize_t nq = q.shape[0], nk = k.shape[0], width = q.shape[1]
    cdef Py_ssize_t hd = width // n_heads
    cdef Py_ssize_t h, i, j, c, off
    cdef double scale = 1.0 / sqrt(<double>hd)
    cdef double dot, gs
    gq_arr = np.zeros((nq, width))
    gk_arr = np.zeros((nk, width))
    gv_arr = np.zeros((nk, width))
    gw_arr = np.empty(nk)
    cdef double[:, ::1] gq = gq_arr
    cdef double[:, ::1] gk = gk_arr
    cdef double[:, ::1] gv = gv_arr
    cdef double[::1] gw = gw_arr
    for h in range(n_heads):
        off = h * hd
        for i in range(nq):
            dot = 0.0
            for j in range(nk):
                gw[j] = 0.0
                for c in range(hd):
                    gw[j] += gout[i, off + c] * v[j, off + c]
                    gv[j, off + c] += w[h, i, j] * gout[i, off + c]
                dot += gw[j] * w[h, i, j]
            for j in range(nk):
                gs = w[h, i, j] * (gw[j] - dot) * scale
                for c in range(hd):
                    gq[i, off + c] += gs * k[j, off + c]
                    gk[j, off + c] += gs * q[i, off + c]
    return gq_arr, gk_arr, gv_arr
