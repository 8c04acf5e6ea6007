"""Validated forward operations on single samples (H, W, C) or batches (N, H, W, C)."""

from __future__ import annotations

import numpy as np

from . import kernels
from .layers import ShapeError

PROB_FLOOR = 1e-12


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")


def _common(x, *arrays):
    dtype = np.result_type(x, *arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    return [np.ascontiguousarray(a, dtype=dtype) for a in (x, *arrays)]


def _check_window(kh: int, kw: int, h: int, w: int, what: str) -> None:
    if kh > h or kw > w:
        raise ShapeError(f"{what} window {kh}x{kw} larger than input {h}x{w}")


def conv2d_forward(x, filters, bias, stride: int = 1) -> np.ndarray:
    """Valid 2-D convolution. ``filters`` has shape (KH, KW, Cin, F)."""
    xb, single = _as_batch(x)
    filters = np.asarray(filters)
    bias = np.asarray(bias)
    if filters.ndim != 4:
        raise ShapeError(f"conv2d filters must be 4-D (KH, KW, Cin, F), got {filters.shape}")
    kh, kw, cin, nf = filters.shape
    if cin != xb.shape[3]:
        raise ShapeError(f"conv2d filters expect {cin} input channels, input has {xb.shape[3]}")
    if bias.shape != (nf,):
        raise ShapeError(f"conv2d bias must have shape ({nf},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    _check_window(kh, kw, xb.shape[1], xb.shape[2], "conv2d")
    y = kernels.conv2d_forward(*_common(xb, filters, bias), stride)
    return y[0] if single else y


def depthwise_conv2d_forward(x, filters, bias, stride: int = 1) -> np.ndarray:
    """Per-channel valid convolution. ``filters`` has shape (KH, KW, C)."""
    xb, single = _as_batch(x)
    filters = np.asarray(filters)
    bias = np.asarray(bias)
    if filters.ndim != 3:
        raise ShapeError(f"depthwise filters must be 3-D (KH, KW, C), got {filters.shape}")
    kh, kw, c = filters.shape
    if c != xb.shape[3]:
        raise ShapeError(f"depthwise needs one filter per channel: {c} filters, {xb.shape[3]} channels")
    if bias.shape != (c,):
        raise ShapeError(f"depthwise bias must have shape ({c},), got {bias.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    _check_window(kh, kw, xb.shape[1], xb.shape[2], "depthwise_conv2d")
    y = kernels.depthwise_forward(*_common(xb, filters, bias), stride)
    return y[0] if single else y


def pointwise_conv2d_forward(x, filters, bias) -> np.ndarray:
    """1x1 convolution. ``filters`` may be (1, 1, Cin, F) or (Cin, F)."""
    xb, single = _as_batch(x)
    filters = np.asarray(filters)
    if filters.ndim == 4:
        if filters.shape[:2] != (1, 1):
            raise ShapeError(f"pointwise filters must be 1x1, got {filters.shape}")
        filters = filters[0, 0]
    if filters.ndim != 2 or filters.shape[0] != xb.shape[3]:
        raise ShapeError(
            f"pointwise filters {filters.shape} incompatible with {xb.shape[3]} input channels"
        )
    bias = np.asarray(bias)
    if bias.shape != (filters.shape[1],):
        raise ShapeError(f"pointwise bias must have shape ({filters.shape[1]},), got {bias.shape}")
    xb, filters, bias = _common(xb, filters, bias)
    y = xb @ filters + bias
    return y[0] if single else y


def maxpool_forward(x, window: tuple[int, int], stride: int | None = None) -> np.ndarray:
    xb, single = _as_batch(x)
    ph, pw = window
    stride = stride or ph
    _check_window(ph, pw, xb.shape[1], xb.shape[2], "maxpool")
    (xb,) = _common(xb)
    y, _ = kernels.maxpool_forward(xb, ph, pw, stride)
    return y[0] if single else y


def dense_forward(x, weights, bias) -> np.ndarray:
    """``y = W^T x + b`` for a flat input (n,) or batch (N, n); W is (n, m)."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense weights {weights.shape} incompatible with input length {x.shape[-1]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weights.shape[1]},), got {bias.shape}")
    x, weights, bias = _common(x, weights, bias)
    return x @ weights + bias


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(probs, true_class: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= true_class < probs.shape[-1]:
        raise IndexError(f"class {true_class} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(float(probs[true_class]), PROB_FLOOR)))
