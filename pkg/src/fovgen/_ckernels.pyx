# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for the conv layers.

Layout is patch-major: cols (N, C*kh*kw, OH*OW), so stride-1 rows are
contiguous runs handled by memcpy (im2col) or vectorizable add loops
(col2im).  Pure-numpy fallbacks live in fovgen.kernels.
"""
from libc.string cimport memcpy, memset

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad, real[:, :, ::1] out):
    """Gather conv patches: x (N,C,H,W) -> out (N, C*kh*kw, OH*OW)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, c, oy, ox, ky, kx, iy, row, ox0, ox1, i
    cdef real *src
    cdef real *dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (c * kh + ky) * kw + kx
                        # valid ox range: 0 <= ox*stride + kx - pad < W
                        ox0 = 0
                        while ox0 * stride + kx - pad < 0:
                            ox0 += 1
                        ox1 = OW
                        while ox1 > ox0 and (ox1 - 1) * stride + kx - pad >= W:
                            ox1 -= 1
                        for oy in range(OH):
                            iy = oy * stride + ky - pad
                            dst = &out[n, row, oy * OW]
                            if iy < 0 or iy >= H:
                                memset(dst, 0, OW * sizeof(real))
                                continue
                            if ox0 > 0:
                                memset(dst, 0, ox0 * sizeof(real))
                            src = &x[n, c, iy, ox0 * stride + kx - pad]
                            if stride == 1:
                                memcpy(dst + ox0, src, (ox1 - ox0) * sizeof(real))
                            else:
                                for i in range(ox1 - ox0):
                                    dst[ox0 + i] = src[i * stride]
                            if ox1 < OW:
                                memset(dst + ox1, 0, (OW - ox1) * sizeof(real))
    return None


def col2im(real[:, :, ::1] cols, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad, real[:, :, :, ::1] out):
    """Scatter-add patch gradients: cols (N, C*kh*kw, OH*OW) -> out (N,C,H,W).

    ``out`` must be zero-initialized by the caller.
    """
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, c, oy, ox, ky, kx, iy, row, ox0, ox1, i
    cdef real *src
    cdef real *dst
    with nogil:
        for n in range(N):
            for c in range(C):
                for ky in range(kh):
                    for kx in range(kw):
                        row = (c * kh + ky) * kw + kx
                        ox0 = 0
                        while ox0 * stride + kx - pad < 0:
                            ox0 += 1
                        ox1 = OW
                        while ox1 > ox0 and (ox1 - 1) * stride + kx - pad >= W:
                            ox1 -= 1
                        for oy in range(OH):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            src = &cols[n, row, oy * OW]
                            dst = &out[n, c, iy, kx - pad]
                            if stride == 1:
                                for i in range(ox0, ox1):
                                    dst[i] += src[i]
                            else:
                                for i in range(ox0, ox1):
                                    dst[i * stride] += src[i]
    return None
