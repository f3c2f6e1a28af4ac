# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels.

Same contracts and accumulation order as ``_pykernels``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] out,
                  int kh, int kw, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, y, xx, row, col
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t iy, ix
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for y in range(oh):
                        iy = y * stride + i - pad
                        for xx in range(ow):
                            ix = xx * stride + j - pad
                            col = y * ow + xx
                            if iy < 0 or iy >= h or ix < 0 or ix >= w:
                                out[n, row, col] = 0
                            else:
                                out[n, row, col] = x[n, c, iy, ix]


cdef void _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out,
                  int kh, int kw, int stride, int pad, int oh, int ow) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, y, xx, row
    cdef Py_ssize_t h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t iy, ix
    for n in range(out.shape[0]):
        for c in range(out.shape[1]):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for y in range(oh):
                        iy = y * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for xx in range(ow):
                            ix = xx * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[n, c, iy, ix] += cols[n, row, y * ow + xx]


cdef void _pool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                    cnp.int8_t[:, :, :, ::1] idx) noexcept nogil:
    cdef Py_ssize_t n, c, y, xx, k
    cdef real best, v
    cdef cnp.int8_t arg
    for n in range(out.shape[0]):
        for c in range(out.shape[1]):
            for y in range(out.shape[2]):
                for xx in range(out.shape[3]):
                    best = x[n, c, 2 * y, 2 * xx]
                    arg = 0
                    for k in range(1, 4):
                        v = x[n, c, 2 * y + k // 2, 2 * xx + k % 2]
                        if v > best:
                            best = v
                            arg = <cnp.int8_t>k
                    out[n, c, y, xx] = best
                    idx[n, c, y, xx] = arg


cdef void _pool_bwd(const real[:, :, :, ::1] g, const cnp.int8_t[:, :, :, ::1] idx,
                    real[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t n, c, y, xx
    cdef int k
    for n in range(g.shape[0]):
        for c in range(g.shape[1]):
            for y in range(g.shape[2]):
                for xx in range(g.shape[3]):
                    k = idx[n, c, y, xx]
                    out[n, c, 2 * y + k // 2, 2 * xx + k % 2] = g[n, c, y, xx]


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n, c * kh * kw, oh * ow), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, out, kh, kw, stride, pad, oh, ow)
    else:
        _im2col[double](x, out, kh, kw, stride, pad, oh, ow)
    return out


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = shape
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    cols = cols.reshape(n, c * kh * kw, oh * ow)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, kh, kw, stride, pad, oh, ow)
    else:
        _col2im[double](cols, out, kh, kw, stride, pad, oh, ow)
    return out


def maxpool2_forward(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    if x.dtype == np.float32:
        _pool_fwd[float](x, out, idx)
    else:
        _pool_fwd[double](x, out, idx)
    return out, idx


def maxpool2_backward(grad, idx):
    grad = np.ascontiguousarray(grad)
    n, c, oh, ow = grad.shape
    out = np.zeros((n, c, oh * 2, ow * 2), dtype=grad.dtype)
    if grad.dtype == np.float32:
        _pool_bwd[float](grad, np.ascontiguousarray(idx), out)
    else:
        _pool_bwd[double](grad, np.ascontiguousarray(idx), out)
    return out
