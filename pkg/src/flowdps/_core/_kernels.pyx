# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled image kernels for the structured forward operators."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def correlate2d(double[:, :, ::1] x, double[:, ::1] k):
    """Zero-padded 'same' correlation of each image in a (n, H, W) stack."""
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t kh = k.shape[0], kw = k.shape[1]
    cdef Py_ssize_t ch = kh // 2, cw = kw // 2
    cdef Py_ssize_t b, i, j, u, v, ii, jj, u0, u1, v0, v1
    cdef double acc
    out_arr = np.zeros((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for b in range(n):
            for i in range(h):
                u0 = ch - i if i < ch else 0
                u1 = h - i + ch if h - i + ch < kh else kh
                for j in range(w):
                    v0 = cw - j if j < cw else 0
                    v1 = w - j + cw if w - j + cw < kw else kw
                    acc = 0.0
                    for u in range(u0, u1):
                        ii = i + u - ch
                        for v in range(v0, v1):
                            jj = j + v - cw
                            acc = acc + k[u, v] * x[b, ii, jj]
                    out[b, i, j] = acc
    return out_arr


def avgpool2d(double[:, :, ::1] x, Py_ssize_t f):
    """Mean over non-overlapping f x f blocks."""
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t ho = h // f, wo = w // f
    cdef Py_ssize_t b, i, j, u, v
    cdef double acc, scale = 1.0 / (f * f)
    out_arr = np.empty((n, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for u in range(f):
                        for v in range(f):
                            acc = acc + x[b, i * f + u, j * f + v]
                    out[b, i, j] = acc * scale
    return out_arr


def avgpool2d_adjoint(double[:, :, ::1] y, Py_ssize_t f):
    """Replicate each entry over its f x f block, scaled by 1/f^2."""
    cdef Py_ssize_t n = y.shape[0], ho = y.shape[1], wo = y.shape[2]
    cdef Py_ssize_t b, i, j, u, v
    cdef double val, scale = 1.0 / (f * f)
    out_arr = np.empty((n, ho * f, wo * f), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    val = y[b, i, j] * scale
                    for u in range(f):
                        for v in range(f):
                            out[b, i * f + u, j * f + v] = val
    return out_arr
