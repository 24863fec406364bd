# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: FNV-1a hashing and im2col/col2im for same-padded convolution.

Every routine here has a numpy twin in ``_pykernels`` that produces bit-identical
results; ``graybox.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.stdint cimport uint64_t

cnp.import_array()

BACKEND = "cython"


def fnv1a64(const unsigned char[::1] data, uint64_t h=0xcbf29ce484222325):
    cdef Py_ssize_t i, n = data.shape[0]
    cdef uint64_t prime = 0x100000001b3
    with nogil:
        for i in range(n):
            h = (h ^ data[i]) * prime
    return h


def _im2col(const floating[:, :, :, ::1] x, floating[:, ::1] cols, int k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, y, xx, ky, kx, yy, xs, row, col
    cdef int p = k // 2
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    row = (b * H + y) * W + xx
                    col = 0
                    for c in range(C):
                        for ky in range(k):
                            yy = y + ky - p
                            for kx in range(k):
                                xs = xx + kx - p
                                if 0 <= yy < H and 0 <= xs < W:
                                    cols[row, col] = x[b, c, yy, xs]
                                else:
                                    cols[row, col] = 0
                                col += 1


def im2col(x, int k):
    B, C, H, W = x.shape
    cols = np.empty((B * H * W, C * k * k), dtype=x.dtype)
    _im2col(np.ascontiguousarray(x), cols, k)
    return cols


def _col2im(const floating[:, ::1] cols, floating[:, :, :, ::1] out, int k):
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t b, c, y, xx, ky, kx, ys, xs
    cdef int p = k // 2
    cdef floating acc
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(H):
                    for xx in range(W):
                        acc = 0
                        for ky in range(k):
                            ys = y + p - ky
                            if ys < 0 or ys >= H:
                                continue
                            for kx in range(k):
                                xs = xx + p - kx
                                if xs < 0 or xs >= W:
                                    continue
                                acc = acc + cols[(b * H + ys) * W + xs, (c * k + ky) * k + kx]
                        out[b, c, y, xx] = acc


def col2im(cols, shape, int k):
    out = np.empty(shape, dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), out, k)
    return out
