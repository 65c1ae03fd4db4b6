# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels (im2col/col2im, bilinear sampling).

Signatures mirror ``seqvo._kernels_py``; see that module for semantics.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] x, real[:, :, ::1] out, int k, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], Wp = x.shape[3]
    cdef Py_ssize_t Ho = (x.shape[2] - k) // stride + 1
    cdef Py_ssize_t Wo = (x.shape[3] - k) // stride + 1
    cdef Py_ssize_t b, c, i, j, oh, ow, row
    cdef real* src
    cdef real* dst
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        dst = &out[b, row, 0]
                        for oh in range(Ho):
                            src = &x[b, c, oh * stride + i, j]
                            for ow in range(Wo):
                                dst[oh * Wo + ow] = src[ow * stride]


def im2col(x, int k, int stride):
    x = np.ascontiguousarray(x)
    B, C, Hp, Wp = x.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    out = np.empty((B, C * k * k, Ho * Wo), dtype=x.dtype)
    _im2col(x, out, k, stride)
    return out


def _col2im(real[:, :, ::1] cols, real[:, :, :, ::1] out, int k, int stride):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t Ho = (out.shape[2] - k) // stride + 1
    cdef Py_ssize_t Wo = (out.shape[3] - k) // stride + 1
    cdef Py_ssize_t b, c, i, j, oh, ow, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(k):
                    for j in range(k):
                        row = (c * k + i) * k + j
                        for oh in range(Ho):
                            for ow in range(Wo):
                                out[b, c, oh * stride + i, ow * stride + j] += cols[b, row, oh * Wo + ow]


def col2im(cols, shape, int k, int stride):
    cols = np.ascontiguousarray(cols)
    B, C, Hp, Wp = shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    cols = cols.reshape(B, C * k * k, Ho * Wo)
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, out, k, stride)
    return out


def _bilinear_forward(real[:, :, ::1] src, real[:, ::1] x, real[:, ::1] y,
                      real[:, :, ::1] out, int H, int W):
    cdef Py_ssize_t B = src.shape[0], C = src.shape[1], N = x.shape[1]
    cdef Py_ssize_t b, n, c, x0, y0
    cdef real fx, fy, wx, wy, w00, w01, w10, w11, acc
    cdef bint ok00, ok01, ok10, ok11
    with nogil:
        for b in range(B):
            for n in range(N):
                fx = floor(x[b, n])
                fy = floor(y[b, n])
                wx = x[b, n] - fx
                wy = y[b, n] - fy
                x0 = <Py_ssize_t>fx
                y0 = <Py_ssize_t>fy
                ok00 = x0 >= 0 and x0 < W and y0 >= 0 and y0 < H
                ok01 = x0 + 1 >= 0 and x0 + 1 < W and y0 >= 0 and y0 < H
                ok10 = x0 >= 0 and x0 < W and y0 + 1 >= 0 and y0 + 1 < H
                ok11 = x0 + 1 >= 0 and x0 + 1 < W and y0 + 1 >= 0 and y0 + 1 < H
                w00 = (1 - wx) * (1 - wy)
                w01 = wx * (1 - wy)
                w10 = (1 - wx) * wy
                w11 = wx * wy
                for c in range(C):
                    acc = 0
                    if ok00:
                        acc = acc + src[b, c, y0 * W + x0] * w00
                    if ok01:
                        acc = acc + src[b, c, y0 * W + x0 + 1] * w01
                    if ok10:
                        acc = acc + src[b, c, (y0 + 1) * W + x0] * w10
                    if ok11:
                        acc = acc + src[b, c, (y0 + 1) * W + x0 + 1] * w11
                    out[b, c, n] = acc


def bilinear_forward(src, x, y):
    src = np.ascontiguousarray(src)
    B, C, H, W = src.shape
    x = np.ascontiguousarray(x, dtype=src.dtype)
    y = np.ascontiguousarray(y, dtype=src.dtype)
    out = np.empty((B, C, x.shape[1]), dtype=src.dtype)
    _bilinear_forward(src.reshape(B, C, H * W), x, y, out, H, W)
    return out


def _bilinear_backward(real[:, :, ::1] src, real[:, ::1] x, real[:, ::1] y,
                       real[:, :, ::1] gout, real[:, :, ::1] gsrc,
                       real[:, ::1] gx, real[:, ::1] gy, int H, int W, bint need_src):
    cdef Py_ssize_t B = src.shape[0], C = src.shape[1], N = x.shape[1]
    cdef Py_ssize_t b, n, c, x0, y0
    cdef real fx, fy, wx, wy, g, v00, v01, v10, v11, ax, ay
    cdef bint ok00, ok01, ok10, ok11
    with nogil:
        for b in range(B):
            for n in range(N):
                fx = floor(x[b, n])
                fy = floor(y[b, n])
                wx = x[b, n] - fx
                wy = y[b, n] - fy
                x0 = <Py_ssize_t>fx
                y0 = <Py_ssize_t>fy
                ok00 = x0 >= 0 and x0 < W and y0 >= 0 and y0 < H
                ok01 = x0 + 1 >= 0 and x0 + 1 < W and y0 >= 0 and y0 < H
                ok10 = x0 >= 0 and x0 < W and y0 + 1 >= 0 and y0 + 1 < H
                ok11 = x0 + 1 >= 0 and x0 + 1 < W and y0 + 1 >= 0 and y0 + 1 < H
                ax = 0
                ay = 0
                for c in range(C):
                    g = gout[b, c, n]
                    v00 = src[b, c, y0 * W + x0] if ok00 else 0
                    v01 = src[b, c, y0 * W + x0 + 1] if ok01 else 0
                    v10 = src[b, c, (y0 + 1) * W + x0] if ok10 else 0
                    v11 = src[b, c, (y0 + 1) * W + x0 + 1] if ok11 else 0
                    ax = ax + g * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
                    ay = ay + g * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
                    if need_src:
                        if ok00:
                            gsrc[b, c, y0 * W + x0] += g * (1 - wx) * (1 - wy)
                        if ok01:
                            gsrc[b, c, y0 * W + x0 + 1] += g * wx * (1 - wy)
                        if ok10:
                            gsrc[b, c, (y0 + 1) * W + x0] += g * (1 - wx) * wy
                        if ok11:
                            gsrc[b, c, (y0 + 1) * W + x0 + 1] += g * wx * wy
                gx[b, n] = ax
                gy[b, n] = ay


def bilinear_backward(src, x, y, gout, need_src=True):
    src = np.ascontiguousarray(src)
    B, C, H, W = src.shape
    x = np.ascontiguousarray(x, dtype=src.dtype)
    y = np.ascontiguousarray(y, dtype=src.dtype)
    gout = np.ascontiguousarray(gout, dtype=src.dtype)
    gsrc = np.zeros((B, C, H * W), dtype=src.dtype)
    gx = np.empty((B, x.shape[1]), dtype=src.dtype)
    gy = np.empty((B, x.shape[1]), dtype=src.dtype)
    _bilinear_backward(src.reshape(B, C, H * W), x, y, gout, gsrc, gx, gy, H, W, need_src)
    return (gsrc.reshape(B, C, H, W) if need_src else None), gx, gy
