# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled convolution/pooling kernels (hot inner loops of training).

Semantics match _kernels_py exactly; see that module for the layout
conventions. Float32 and float64 are supported via fused types.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

NAME = "cython"

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, ::1] x, real[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - kw) // stride + 1
    y_np = np.zeros((c_out, ho, wo), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] y = y_np
    cdef Py_ssize_t o, c, i, j, ki, kj, ii, jj
    cdef real acc
    with nogil:
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0
                    for c in range(c_in):
                        for ki in range(kh):
                            ii = i * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j * stride + kj - padding
                                if jj < 0 or jj >= wd:
                                    continue
                                acc += x[c, ii, jj] * w[o, c, ki, kj]
                    y[o, i, j] = acc
    return y_np


def conv2d_backward(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] gy,
                    int stride, int padding):
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t c_out = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    dtype = np.float32 if real is float else np.float64
    gx_np = np.zeros((c_in, h, wd), dtype=dtype)
    gw_np = np.zeros((c_out, c_in, kh, kw), dtype=dtype)
    cdef real[:, :, ::1] gx = gx_np
    cdef real[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t o, c, i, j, ki, kj, ii, jj
    cdef real g
    with nogil:
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    g = gy[o, i, j]
                    if g == 0:
                        continue
                    for c in range(c_in):
                        for ki in range(kh):
                            ii = i * stride + ki - padding
                            if ii < 0 or ii >= h:
                                continue
                            for kj in range(kw):
                                jj = j * stride + kj - padding
                                if jj < 0 or jj >= wd:
                                    continue
                                gx[c, ii, jj] += w[o, c, ki, kj] * g
                                gw[o, c, ki, kj] += x[c, ii, jj] * g
    return gx_np, gw_np


def maxpool2d_forward(real[:, :, ::1] x, int window, int stride, int padding):
    cdef Py_ssize_t c_in = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ho = (h + 2 * padding - window) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * padding - window) // stride + 1
    y_np = np.zeros((c_in, ho, wo), dtype=np.float32 if real is float else np.float64)
    amax_np = np.empty((c_in, ho, wo), dtype=np.int64)
    cdef real[:, :, ::1] y = y_np
    cdef cnp.int64_t[:, :, ::1] amax = amax_np
    cdef Py_ssize_t c, i, j, ki, kj, ii, jj
    cdef real best
    cdef cnp.int64_t bidx
    with nogil:
        for c in range(c_in):
            for i in range(ho):
                for j in range(wo):
                    best = -INFINITY
                    bidx = -1
                    for ki in range(window):
                        ii = i * stride + ki - padding
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(window):
                            jj = j * stride + kj - padding
                            if jj < 0 or jj >= wd:
                                continue
                            if x[c, ii, jj] > best:
                                best = x[c, ii, jj]
                                bidx = ii * wd + jj
                    if bidx < 0:
                        best = 0
                    y[c, i, j] = best
                    amax[c, i, j] = bidx
    return y_np, amax_np


def maxpool2d_backward(cnp.int64_t[:, :, ::1] argmax, real[:, :, ::1] gy,
                       Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t c_in = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    gx_np = np.zeros((c_in, h, w), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, ::1] gx = gx_np
    cdef Py_ssize_t c, i, j
    cdef cnp.int64_t idx
    with nogil:
        for c in range(c_in):
            for i in range(ho):
                for j in range(wo):
                    idx = argmax[c, i, j]
                    if idx >= 0:
                        gx[c, idx // w, idx % w] += gy[c, i, j]
    return gx_np
