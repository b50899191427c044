# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stencil kernels; see ``_kernels_py`` for the reference versions."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    PERIODIC = 0


cdef inline Py_ssize_t _wrap(Py_ssize_t i, Py_ssize_t n, int mode) nogil:
    if i < 0:
        return i + n if mode == PERIODIC else 0
    if i >= n:
        return i - n if mode == PERIODIC else n - 1
    return i


def im2col3x3(double[:, :, :, ::1] x, int mode):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t HW = H * W
    out_arr = np.empty((C * 9, B * HW), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double* src
    cdef double* dst
    cdef Py_ssize_t b, c, dy, dx, y, xx, sy
    with nogil:
        for b in range(B):
            for c in range(C):
                for dy in range(3):
                    for y in range(H):
                        sy = _wrap(y + dy - 1, H, mode)
                        src = &x[b, c, sy, 0]
                        # dx = 0: shift right by one, left edge from padding
                        dst = &out[c * 9 + 3 * dy, b * HW + y * W]
                        dst[0] = src[_wrap(-1, W, mode)]
                        for xx in range(1, W):
                            dst[xx] = src[xx - 1]
                        dst = &out[c * 9 + 3 * dy + 1, b * HW + y * W]
                        for xx in range(W):
                            dst[xx] = src[xx]
                        dst = &out[c * 9 + 3 * dy + 2, b * HW + y * W]
                        for xx in range(W - 1):
                            dst[xx] = src[xx + 1]
                        dst[W - 1] = src[_wrap(W, W, mode)]
    return out_arr


def col2im3x3(double[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W, int mode):
    cdef Py_ssize_t HW = H * W
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double* src
    cdef double* dst
    cdef Py_ssize_t b, c, dy, y, xx, sy
    with nogil:
        for b in range(B):
            for c in range(C):
                for dy in range(3):
                    for y in range(H):
                        sy = _wrap(y + dy - 1, H, mode)
                        dst = &out[b, c, sy, 0]
                        src = &cols[c * 9 + 3 * dy, b * HW + y * W]
                        dst[_wrap(-1, W, mode)] += src[0]
                        for xx in range(1, W):
                            dst[xx - 1] += src[xx]
                        src = &cols[c * 9 + 3 * dy + 1, b * HW + y * W]
                        for xx in range(W):
                            dst[xx] += src[xx]
                        src = &cols[c * 9 + 3 * dy + 2, b * HW + y * W]
                        for xx in range(W - 1):
                            dst[xx + 1] += src[xx]
                        dst[_wrap(W, W, mode)] += src[W - 1]
    return out_arr


def darcy_apply(double[:, :, ::1] K, double[:, :, ::1] p, double h):
    cdef Py_ssize_t B = p.shape[0], H = p.shape[1], W = p.shape[2]
    out_arr = np.zeros((B, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double inv_h2 = 1.0 / (h * h)
    cdef double f
    cdef Py_ssize_t b, i, j
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    if j + 1 < W:
                        f = 0.5 * (K[b, i, j] + K[b, i, j + 1]) * (p[b, i, j + 1] - p[b, i, j]) * inv_h2
                        out[b, i, j] += f
                        out[b, i, j + 1] -= f
                    if i + 1 < H:
                        f = 0.5 * (K[b, i, j] + K[b, i + 1, j]) * (p[b, i + 1, j] - p[b, i, j]) * inv_h2
                        out[b, i, j] += f
                        out[b, i + 1, j] -= f
    return out_arr


def darcy_vjp(double[:, :, ::1] K, double[:, :, ::1] p, double[:, :, ::1] g, double h):
    cdef Py_ssize_t B = p.shape[0], H = p.shape[1], W = p.shape[2]
    gK_arr = np.zeros((B, H, W), dtype=np.float64)
    gp_arr = np.zeros((B, H, W), dtype=np.float64)
    cdef double[:, :, ::1] gK = gK_arr
    cdef double[:, :, ::1] gp = gp_arr
    cdef double inv_h2 = 1.0 / (h * h)
    cdef double dg, s
    cdef Py_ssize_t b, i, j
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    if j + 1 < W:
                        dg = g[b, i, j] - g[b, i, j + 1]
                        s = dg * 0.5 * (K[b, i, j] + K[b, i, j + 1]) * inv_h2
                        gp[b, i, j + 1] += s
                        gp[b, i, j] -= s
                        s = 0.5 * dg * (p[b, i, j + 1] - p[b, i, j]) * inv_h2
                        gK[b, i, j + 1] += s
                        gK[b, i, j] += s
                    if i + 1 < H:
                        dg = g[b, i, j] - g[b, i + 1, j]
                        s = dg * 0.5 * (K[b, i, j] + K[b, i + 1, j]) * inv_h2
                        gp[b, i + 1, j] += s
                        gp[b, i, j] -= s
                        s = 0.5 * dg * (p[b, i + 1, j] - p[b, i, j]) * inv_h2
                        gK[b, i + 1, j] += s
                        gK[b, i, j] += s
    return gK_arr, gp_arr
