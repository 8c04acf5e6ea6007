"""Pure-NumPy kernels, used when the compiled extension is unavailable.

Signatures and return conventions match ``_kernels.pyx`` exactly. Arrays are
batched NHWC; filters are (KH, KW, Cin, F) for dense convolution and
(KH, KW, C) for depthwise convolution.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride):
    # (N, OH, OW, C, KH, KW) view, no copy
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x, w, b, stride):
    kh, kw = w.shape[:2]
    win = _windows(x, kh, kw, stride)
    y = np.tensordot(win, w.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    y += b
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv2d_backward(x, w, dy, stride):
    kh, kw = w.shape[:2]
    oh, ow = dy.shape[1:3]
    win = _windows(x, kh, kw, stride)
    dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # (C, KH, KW, F)
    dw = np.ascontiguousarray(dw.transpose(1, 2, 0, 3), dtype=x.dtype)
    db = dy.sum(axis=(0, 1, 2)).astype(x.dtype)
    dx = np.zeros_like(x)
    for di in range(kh):
        for dj in range(kw):
            dx[:, di:di + stride * (oh - 1) + 1:stride,
               dj:dj + stride * (ow - 1) + 1:stride, :] += dy @ w[di, dj].T
    return dx, dw, db


def depthwise_forward(x, w, b, stride):
    kh, kw = w.shape[:2]
    win = _windows(x, kh, kw, stride)
    y = np.einsum("nhwcij,ijc->nhwc", win, w) + b
    return np.ascontiguousarray(y, dtype=x.dtype)


def depthwise_backward(x, w, dy, stride):
    kh, kw = w.shape[:2]
    oh, ow = dy.shape[1:3]
    win = _windows(x, kh, kw, stride)
    dw = np.ascontiguousarray(np.einsum("nhwcij,nhwc->ijc", win, dy), dtype=x.dtype)
    db = dy.sum(axis=(0, 1, 2)).astype(x.dtype)
    dx = np.zeros_like(x)
    for di in range(kh):
        for dj in range(kw):
            dx[:, di:di + stride * (oh - 1) + 1:stride,
               dj:dj + stride * (ow - 1) + 1:stride, :] += dy * w[di, dj]
    return dx, dw, db


def maxpool_forward(x, ph, pw, stride):
    n, h, wd, c = x.shape
    win = _windows(x, ph, pw, stride)
    oh, ow = win.shape[1:3]
    flat = win.reshape(n, oh, ow, c, ph * pw)
    local = flat.argmax(axis=-1)  # first maximum wins ties
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, pw)
    rows = np.arange(oh)[None, :, None, None] * stride + di
    cols = np.arange(ow)[None, None, :, None] * stride + dj
    arg = (rows * wd + cols).astype(np.int64)
    return np.ascontiguousarray(y), arg


def maxpool_backward(dy, arg, h, wd):
    n, oh, ow, c = dy.shape
    dx = np.zeros((n, h * wd, c), dtype=dy.dtype)
    nn = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
    cc = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
    np.add.at(dx, (nn, arg, cc), dy)
    return dx.reshape(n, h, wd, c)
