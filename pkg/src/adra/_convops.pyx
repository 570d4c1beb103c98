# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled gather/scatter kernels for the convolution hot path.

im2col/col2im dominate training time next to the GEMM itself; these loops
mirror the numpy fallback in kernels.py element-for-element (same float32
accumulation order) so the two backends produce bit-identical results.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(cnp.float32_t[:, :, :, ::1] padded, int kh, int kw, int stride):
    """Gather sliding kh x kw patches of a padded NCHW batch.

    Returns an array of shape (n*oh*ow, c*kh*kw) whose row layout matches
    kernels._im2col_numpy: rows ordered (n, oy, ox), columns (c, ki, kj).
    """
    cdef Py_ssize_t n = padded.shape[0]
    cdef Py_ssize_t c = padded.shape[1]
    cdef Py_ssize_t hp = padded.shape[2]
    cdef Py_ssize_t wp = padded.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1

    out = np.empty((n * oh * ow, c * kh * kw), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] cols = out
    cdef Py_ssize_t i, oy, ox, ch, ki, kj, row, col, iy, ix

    with nogil:
        for i in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (i * oh + oy) * ow + ox
                    for ch in range(c):
                        for ki in range(kh):
                            iy = oy * stride + ki
                            for kj in range(kw):
                                ix = ox * stride + kj
                                col = (ch * kh + ki) * kw + kj
                                cols[row, col] = padded[i, ch, iy, ix]
    return out


def col2im(cnp.float32_t[:, ::1] cols, Py_ssize_t n, Py_ssize_t c,
           Py_ssize_t hp, Py_ssize_t wp, int kh, int kw, int stride):
    """Scatter-add column gradients back onto a zeroed padded NCHW batch.

    Inverse layout of im2col. Accumulation runs with (ki, kj) outermost to
    match the fallback's slice-wise adds, keeping float32 sums bit-identical.
    """
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1

    out = np.zeros((n, c, hp, wp), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] padded = out
    cdef Py_ssize_t i, oy, ox, ch, ki, kj, row, col

    with nogil:
        for ki in range(kh):
            for kj in range(kw):
                for i in range(n):
                    for oy in range(oh):
                        for ox in range(ow):
                            row = (i * oh + oy) * ow + ox
                            for ch in range(c):
                                col = (ch * kh + ki) * kw + kj
                                padded[i, ch, oy * stride + ki, ox * stride + kj] += cols[row, col]
    return out
