"""Convolution kernels: compiled extension core with a pure-numpy fallback.

The Cython module is picked at import time when available; set
``ADRA_PURE_PYTHON=1`` before import to force the fallback. Both backends
produce bit-identical float32 results (the fallback is the reference, the
compiled loops replicate its accumulation order). Non-float32 inputs
(used by the float64 gradient-check oracle) always take the numpy path.
"""

import os

import numpy as np

try:
    from adra import _convops as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

if os.environ.get("ADRA_PURE_PYTHON"):
    _compiled = None


def backend_name() -> str:
    return "numpy" if _compiled is None else "compiled"


def pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def _im2col_numpy(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, hp, wp = padded.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im_numpy(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
                  kh: int, kw: int, stride: int) -> np.ndarray:
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols6 = cols.reshape(n, oh, ow, c, kh, kw)
    padded = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            plane = cols6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            padded[:, :, ki : ki + stride * oh : stride,
                   kj : kj + stride * ow : stride] += plane
    return padded


def im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix of shape (n*oh*ow, c*kh*kw) from a padded NCHW batch."""
    if _compiled is not None and padded.dtype == np.float32:
        return _compiled.im2col(np.ascontiguousarray(padded), kh, kw, stride)
    return _im2col_numpy(padded, kh, kw, stride)


def col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
           kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients back to padded NCHW layout."""
    if _compiled is not None and cols.dtype == np.float32:
        return _compiled.col2im(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw, stride)
    return _col2im_numpy(cols, n, c, hp, wp, kh, kw, stride)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int, pad: int):
    """Cross-correlation forward. Returns (y, cols); cols is None on the 1x1 fast path."""
    co, ci, kh, kw = kernel.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        y = np.tensordot(kernel[:, :, 0, 0], x, axes=([1], [1]))  # (co, n, h, w)
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3)), None
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = im2col(pad_input(x, pad), kh, kw, stride)
    y = cols @ kernel.reshape(co, -1).T  # (n*oh*ow, co)
    y = y.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), cols


def conv2d_backward(dy: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    stride: int, pad: int, cols,
                    need_dx: bool = True, need_dw: bool = True):
    """Gradients (dx, dkernel) for conv2d_forward; cols as returned by it.

    Either gradient can be skipped (returned as None) when the corresponding
    input does not require one; skipping dx avoids the col2im scatter.
    """
    co, ci, kh, kw = kernel.shape
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dw = dx = None
        if need_dw:
            dw = np.tensordot(dy, x, axes=([0, 2, 3], [0, 2, 3])).reshape(kernel.shape)
        if need_dx:
            dx = np.tensordot(dy, kernel[:, :, 0, 0], axes=([1], [0]))  # (n, h, w, ci)
            dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        return dx, dw
    n, c, h, w = x.shape
    oh, ow = dy.shape[2], dy.shape[3]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
    dw = dx = None
    if need_dw:
        if cols is None:
            cols = im2col(pad_input(x, pad), kh, kw, stride)
        dw = (dy_mat.T @ cols).reshape(kernel.shape)
    if need_dx:
        dcols = dy_mat @ kernel.reshape(co, -1)
        dpadded = col2im(dcols, n, c, h + 2 * pad, w + 2 * pad, kh, kw, stride)
        if pad == 0:
            dx = dpadded
        else:
            dx = np.ascontiguousarray(dpadded[:, :, pad : pad + h, pad : pad + w])
    return dx, dw
