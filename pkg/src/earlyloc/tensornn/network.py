"""Sequential forward/backward passes, weight storage and SGD training."""

from __future__ import annotations

import hashlib
import logging
import math
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kernels
from .layers import LayerSpec, Shape, ShapeError, block_shapes, infer_shapes
from .ops import PROB_FLOOR

logger = logging.getLogger(__name__)

GradientStore = dict  # block name -> ndarray, congruent with WeightStore


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class WeightStore:
    """Flat mapping of block name (``<layer>/kernel``, ``<layer>/bias``) to arrays.

    Blocks listed in ``frozen`` are never touched by :func:`sgd_step`.
    """

    def __init__(self, blocks: dict[str, np.ndarray] | None = None, frozen: Iterable[str] = ()):
        self._blocks: dict[str, np.ndarray] = dict(blocks or {})
        self.frozen: set[str] = set(frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._blocks[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._blocks[name] = value

    def __contains__(self, name: object) -> bool:
        return name in self._blocks

    def __iter__(self) -> Iterator[str]:
        return iter(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def keys(self):
        return self._blocks.keys()

    def items(self):
        return self._blocks.items()

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self._blocks.items()}, self.frozen)

    def freeze(self, names: Iterable[str]) -> None:
        self.frozen.update(names)

    def unfreeze(self, names: Iterable[str]) -> None:
        self.frozen.difference_update(names)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._blocks.values())

    def checksum(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over block names, shapes and raw bytes."""
        h = hashlib.sha256()
        for name in sorted(self._blocks if names is None else names):
            block = np.ascontiguousarray(self._blocks[name])
            h.update(name.encode())
            h.update(str(block.shape).encode())
            h.update(block.tobytes())
        return h.hexdigest()


def layer_blocks(layers: Sequence[LayerSpec]) -> list[str]:
    names = []
    for layer in layers:
        if layer.trainable:
            names += [f"{layer.name}/kernel", f"{layer.name}/bias"]
    return names


def init_weights(
    layers: Sequence[LayerSpec],
    input_shape: Shape,
    seed: int | np.random.Generator = 0,
    dtype=np.float32,
    store: WeightStore | None = None,
) -> WeightStore:
    """Glorot-uniform kernels and zero biases for every trainable layer."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = store if store is not None else WeightStore()
    for layer, (in_shape, _) in zip(layers, infer_shapes(layers, input_shape)):
        shapes = block_shapes(layer, in_shape)
        if not shapes:
            continue
        kshape = shapes["kernel"]
        if layer.kind == "dense":
            fan_in, fan_out = kshape
        elif layer.kind == "depthwise_conv2d":
            fan_in = fan_out = kshape[0] * kshape[1]
        else:
            field = kshape[0] * kshape[1]
            fan_in, fan_out = field * kshape[2], field * kshape[3]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        store[f"{layer.name}/kernel"] = rng.uniform(-limit, limit, kshape).astype(dtype)
        store[f"{layer.name}/bias"] = np.zeros(shapes["bias"], dtype=dtype)
    return store


def check_weights(layers: Sequence[LayerSpec], input_shape: Shape, weights: WeightStore) -> None:
    for layer, (in_shape, _) in zip(layers, infer_shapes(layers, input_shape)):
        for suffix, shape in block_shapes(layer, in_shape).items():
            name = f"{layer.name}/{suffix}"
            if name not in weights:
                raise ShapeError(f"missing weight block {name}")
            if tuple(weights[name].shape) != tuple(shape):
                raise ShapeError(f"block {name} has shape {weights[name].shape}, expected {shape}")


def _layer_forward(layer: LayerSpec, weights: WeightStore, x: np.ndarray):
    """Forward one layer on a batch; returns (output, backward cache)."""
    kind = layer.kind
    if kind == "conv2d":
        w, b = weights[f"{layer.name}/kernel"], weights[f"{layer.name}/bias"]
        return kernels.conv2d_forward(x, w, b, layer.stride), x
    if kind == "depthwise_conv2d":
        w, b = weights[f"{layer.name}/kernel"], weights[f"{layer.name}/bias"]
        return kernels.depthwise_forward(x, w, b, layer.stride), x
    if kind == "pointwise_conv2d":
        w, b = weights[f"{layer.name}/kernel"], weights[f"{layer.name}/bias"]
        return x @ w[0, 0] + b, x
    if kind == "dense":
        w, b = weights[f"{layer.name}/kernel"], weights[f"{layer.name}/bias"]
        return x @ w + b, x
    if kind == "relu":
        return np.maximum(x, 0), x
    if kind == "softmax":
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        return p, p
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "maxpool":
        ph, pw = layer.kernel
        y, arg = kernels.maxpool_forward(x, ph, pw, layer.stride)
        return y, (arg, x.shape[1], x.shape[2])
    raise ValueError(f"unsupported layer kind {kind}")


def forward(
    layers: Sequence[LayerSpec],
    weights: WeightStore,
    x: np.ndarray,
    keep_cache: bool = False,
):
    """Run ``layers`` on a batch ``x``.

    Returns the output, or ``(output, caches)`` when ``keep_cache`` is set.
    """
    caches = []
    for layer in layers:
        x, cache = _layer_forward(layer, weights, x)
        if keep_cache:
            caches.append(cache)
    return (x, caches) if keep_cache else x


def _layer_backward(layer: LayerSpec, weights: WeightStore, cache, dy: np.ndarray, need_dx: bool):
    kind = layer.kind
    grads = {}
    dx = None
    if kind == "conv2d":
        w = weights[f"{layer.name}/kernel"]
        dx, dw, db = kernels.conv2d_backward(cache, w, np.ascontiguousarray(dy), layer.stride)
        grads = {"kernel": dw, "bias": db}
    elif kind == "depthwise_conv2d":
        w = weights[f"{layer.name}/kernel"]
        dx, dw, db = kernels.depthwise_backward(cache, w, np.ascontiguousarray(dy), layer.stride)
        grads = {"kernel": dw, "bias": db}
    elif kind == "pointwise_conv2d":
        w = weights[f"{layer.name}/kernel"][0, 0]
        cin, f = w.shape
        dw = cache.reshape(-1, cin).T @ dy.reshape(-1, f)
        grads = {"kernel": dw[None, None], "bias": dy.sum(axis=(0, 1, 2))}
        if need_dx:
            dx = dy @ w.T
    elif kind == "dense":
        w = weights[f"{layer.name}/kernel"]
        grads = {"kernel": cache.T @ dy, "bias": dy.sum(axis=0)}
        if need_dx:
            dx = dy @ w.T
    elif kind == "relu":
        dx = dy * (cache > 0)
    elif kind == "softmax":
        p = cache
        dx = p * (dy - (dy * p).sum(axis=-1, keepdims=True))
    elif kind == "flatten":
        dx = dy.reshape(cache)
    elif kind == "maxpool":
        arg, h, w_ = cache
        dx = kernels.maxpool_backward(np.ascontiguousarray(dy), arg, h, w_)
    else:
        raise ValueError(f"unsupported layer kind {kind}")
    return dx, grads


def loss_and_grad(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean clamped cross-entropy over a batch and its gradient w.r.t. ``probs``."""
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = float(-np.log(clamped).mean())
    dprobs = np.zeros_like(probs)
    # clamp has zero slope below the floor
    dprobs[np.arange(n), labels] = np.where(picked >= PROB_FLOOR, -1.0 / (n * clamped), 0.0)
    return loss, dprobs


def backward(
    layers: Sequence[LayerSpec],
    weights: WeightStore,
    x: np.ndarray,
    labels,
    trainable: Iterable[str] | None = None,
) -> tuple[float, GradientStore]:
    """Mean cross-entropy loss and gradients for trainable, non-frozen blocks.

    ``layers`` must end in softmax. ``x`` may be one sample (H, W, C) or a
    batch; ``labels`` is an int or a sequence of ints accordingly.
    """
    if not layers or layers[-1].kind != "softmax":
        raise ShapeError("backward needs a network ending in softmax")
    x = np.asarray(x)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    dtype = weights[layer_blocks(layers)[0]].dtype if layer_blocks(layers) else x.dtype
    if x.ndim in (1, 3):
        x = x[None]
    x = np.ascontiguousarray(x, dtype=dtype)
    if len(labels) != x.shape[0]:
        raise ShapeError(f"{len(labels)} labels for a batch of {x.shape[0]}")
    n_classes = output_width(layers)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError(f"labels outside [0, {n_classes})")

    if trainable is None:
        trainable = [b for b in layer_blocks(layers) if b not in weights.frozen]
    trainable = set(trainable) - weights.frozen
    trainable_layers = [i for i, layer in enumerate(layers) if f"{layer.name}/kernel" in trainable]

    probs, caches = forward(layers, weights, x, keep_cache=True)
    loss, dy = loss_and_grad(probs, labels)
    grads: GradientStore = {}
    if not trainable_layers:
        return loss, grads
    first = trainable_layers[0]
    for i in range(len(layers) - 1, first - 1, -1):
        layer = layers[i]
        dy, g = _layer_backward(layer, weights, caches[i], dy, need_dx=i > first)
        for suffix, val in g.items():
            name = f"{layer.name}/{suffix}"
            if name in trainable:
                grads[name] = val.astype(dtype, copy=False)
    return loss, grads


def output_width(layers: Sequence[LayerSpec]) -> int:
    for layer in reversed(layers):
        if layer.kind == "dense":
            return layer.units
    raise ShapeError("network has no dense output layer")


def sgd_step(weights: WeightStore, grads: GradientStore, learning_rate: float) -> WeightStore:
    """In-place ``w <- w - lr * g`` for every non-frozen block with a gradient."""
    if learning_rate == 0:
        return weights
    for name, g in grads.items():
        if name in weights.frozen:
            continue
        w = weights[name]
        if w.shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, weights {w.shape}")
        w -= np.asarray(learning_rate, dtype=w.dtype) * g
    return weights


def train_sgd(
    layers: Sequence[LayerSpec],
    weights: WeightStore,
    x: np.ndarray,
    y: np.ndarray,
    *,
    lr: float = 0.01,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    trainable: Iterable[str] | None = None,
) -> list[float]:
    """Minibatch SGD with per-epoch reshuffling. Returns mean loss per epoch."""
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    trainable = list(trainable) if trainable is not None else None
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = backward(layers, weights, x[idx], y[idx], trainable)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}")
            sgd_step(weights, grads, lr)
            total += loss * len(idx)
        history.append(total / len(x))
        logger.debug("epoch %d loss %.5f", epoch, history[-1])
    return history


def predict(layers: Sequence[LayerSpec], weights: WeightStore, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Batched forward; returns the final-layer outputs for all rows of ``x``."""
    outs = [forward(layers, weights, np.ascontiguousarray(x[i:i + batch_size]))
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.empty((0,))
