# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sliding-window kernels.

Same contracts as ``deepid3._pykernels``; inputs are C-contiguous float64,
channels-first ``[C, H, W]``.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((C * kh * kw, oh * ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, y, xo, row, iy, ix
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for y in range(oh):
                    iy = y * stride + i - pad
                    if iy < 0 or iy >= H:
                        continue
                    for xo in range(ow):
                        ix = xo * stride + j - pad
                        if 0 <= ix < W:
                            out[row, y * ow + xo] = x[c, iy, ix]
    return out_arr


def col2im(double[:, ::1] cols, int C, int H, int W, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, y, xo, row, iy, ix
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for y in range(oh):
                    iy = y * stride + i - pad
                    if iy < 0 or iy >= H:
                        continue
                    for xo in range(ow):
                        ix = xo * stride + j - pad
                        if 0 <= ix < W:
                            out[c, iy, ix] += cols[row, y * ow + xo]
    return out_arr


def maxpool_forward(double[:, :, ::1] x, int window, int stride, int pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t oh = (H + 2 * pad - window) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - window) // stride + 1
    out_arr = np.empty((C, oh, ow), dtype=np.float64)
    idx_arr = np.empty((C, oh, ow), dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef long long[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t c, y, xo, i, j, iy, ix, best_i
    cdef double best, v
    for c in range(C):
        for y in range(oh):
            for xo in range(ow):
                best_i = -1
                best = 0.0
                # row-major scan with strict '>' keeps the lowest flat index on ties
                for i in range(window):
                    iy = y * stride + i - pad
                    if iy < 0 or iy >= H:
                        continue
                    for j in range(window):
                        ix = xo * stride + j - pad
                        if ix < 0 or ix >= W:
                            continue
                        v = x[c, iy, ix]
                        if best_i < 0 or v > best:
                            best = v
                            best_i = iy * W + ix
                out[c, y, xo] = best
                idx[c, y, xo] = best_i
    return out_arr, idx_arr


def maxpool_backward(double[:, :, ::1] grad_out, long long[:, :, ::1] idx, int H, int W):
    cdef Py_ssize_t C = grad_out.shape[0], oh = grad_out.shape[1], ow = grad_out.shape[2]
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr.reshape(C, H * W)
    cdef Py_ssize_t c, y, xo
    for c in range(C):
        for y in range(oh):
            for xo in range(ow):
                out[c, idx[c, y, xo]] += grad_out[c, y, xo]
    return out_arr
