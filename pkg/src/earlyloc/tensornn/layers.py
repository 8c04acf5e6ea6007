"""Layer descriptions, shape inference and parameter/MAC accounting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

Shape = tuple[int, ...]

LAYER_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "maxpool",
    "dense",
    "relu",
    "softmax",
    "flatten",
)
TRAINABLE_KINDS = ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "dense")


class ShapeError(ValueError):
    """Raised when tensor or weight shapes are inconsistent with a layer."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``units`` is the filter count for conv2d/pointwise_conv2d and the neuron
    count for dense. ``kernel`` is the window for convolution and pooling.
    """

    name: str
    kind: str
    kernel: tuple[int, int] | None = None
    stride: int = 1
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"{self.name}: stride must be >= 1, got {self.stride}")
        if self.kind in ("conv2d", "depthwise_conv2d", "maxpool"):
            if self.kernel is None or min(self.kernel) < 1:
                raise ValueError(f"{self.name}: {self.kind} needs a positive kernel")
        if self.kind == "pointwise_conv2d":
            object.__setattr__(self, "kernel", (1, 1))
        if self.kind in ("conv2d", "pointwise_conv2d", "dense"):
            if self.units is None or self.units < 1:
                raise ValueError(f"{self.name}: {self.kind} needs units >= 1")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kernel is not None and self.kind != "pointwise_conv2d":
            d["kernel"] = list(self.kernel)
        if self.stride != 1:
            d["stride"] = self.stride
        if self.units is not None:
            d["units"] = self.units
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        kernel = d.get("kernel")
        return cls(
            name=d["name"],
            kind=d["kind"],
            kernel=tuple(kernel) if kernel is not None else None,
            stride=int(d.get("stride", 1)),
            units=d.get("units"),
        )


def conv(name: str, filters: int, kernel: int = 2, stride: int = 1) -> LayerSpec:
    return LayerSpec(name, "conv2d", (kernel, kernel), stride, filters)


def depthwise(name: str, kernel: int = 2, stride: int = 1) -> LayerSpec:
    return LayerSpec(name, "depthwise_conv2d", (kernel, kernel), stride)


def pointwise(name: str, filters: int) -> LayerSpec:
    return LayerSpec(name, "pointwise_conv2d", units=filters)


def maxpool(name: str, window: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec(name, "maxpool", (window, window), stride or window)


def dense(name: str, units: int) -> LayerSpec:
    return LayerSpec(name, "dense", units=units)


def relu(name: str) -> LayerSpec:
    return LayerSpec(name, "relu")


def softmax(name: str) -> LayerSpec:
    return LayerSpec(name, "softmax")


def flatten(name: str) -> LayerSpec:
    return LayerSpec(name, "flatten")


def valid_extent(size: int, window: int, stride: int) -> int:
    """Output extent of a valid (unpadded) window sweep along one axis."""
    return (size - window) // stride + 1


def output_shape(layer: LayerSpec, in_shape: Shape) -> Shape:
    kind = layer.kind
    if kind in ("relu", "softmax"):
        return tuple(in_shape)
    if kind == "flatten":
        n = 1
        for d in in_shape:
            n *= d
        return (n,)
    if kind == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"{layer.name}: dense needs flattened input, got {in_shape}")
        return (layer.units,)
    if len(in_shape) != 3:
        raise ShapeError(f"{layer.name}: {kind} needs (H, W, C) input, got {in_shape}")
    h, w, c = in_shape
    kh, kw = layer.kernel
    if kh > h or kw > w:
        raise ShapeError(
            f"{layer.name}: window {kh}x{kw} does not fit input {h}x{w}"
        )
    oh = valid_extent(h, kh, layer.stride)
    ow = valid_extent(w, kw, layer.stride)
    if kind in ("conv2d", "pointwise_conv2d"):
        return (oh, ow, layer.units)
    return (oh, ow, c)


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Shape) -> list[tuple[Shape, Shape]]:
    """(input shape, output shape) for each layer, in order."""
    shapes = []
    cur = tuple(input_shape)
    for layer in layers:
        out = output_shape(layer, cur)
        shapes.append((cur, out))
        cur = out
    return shapes


def block_shapes(layer: LayerSpec, in_shape: Shape) -> dict[str, Shape]:
    """Weight block shapes keyed by suffix (``kernel``/``bias``)."""
    kind = layer.kind
    if kind in ("conv2d", "pointwise_conv2d"):
        kh, kw = layer.kernel
        return {"kernel": (kh, kw, in_shape[2], layer.units), "bias": (layer.units,)}
    if kind == "depthwise_conv2d":
        kh, kw = layer.kernel
        return {"kernel": (kh, kw, in_shape[2]), "bias": (in_shape[2],)}
    if kind == "dense":
        return {"kernel": (in_shape[0], layer.units), "bias": (layer.units,)}
    return {}


def _prod(shape: Iterable[int]) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def layer_params(layer: LayerSpec, in_shape: Shape) -> int:
    return sum(_prod(s) for s in block_shapes(layer, in_shape).values())


def layer_macs(layer: LayerSpec, in_shape: Shape) -> int:
    """Multiply-accumulates for one forward pass of one sample.

    Activations, pooling and reshapes count zero: they perform no
    multiply-accumulate work.
    """
    kind = layer.kind
    if kind == "dense":
        return in_shape[0] * layer.units
    if kind in ("conv2d", "pointwise_conv2d"):
        oh, ow, f = output_shape(layer, in_shape)
        kh, kw = layer.kernel
        return oh * ow * f * kh * kw * in_shape[2]
    if kind == "depthwise_conv2d":
        oh, ow, c = output_shape(layer, in_shape)
        kh, kw = layer.kernel
        return oh * ow * c * kh * kw
    return 0


def param_count(layers: Sequence[LayerSpec], input_shape: Shape) -> tuple[dict[str, int], int]:
    """Per-layer trainable parameter counts (trainable layers only) and the total."""
    per_layer = {}
    for layer, (in_shape, _) in zip(layers, infer_shapes(layers, input_shape)):
        if layer.trainable:
            per_layer[layer.name] = layer_params(layer, in_shape)
    return per_layer, sum(per_layer.values())


def mac_count(layers: Sequence[LayerSpec], input_shape: Shape, prefix: int | None = None) -> int:
    """MACs of the first ``prefix`` layers (all layers when ``prefix`` is None)."""
    if prefix is None:
        prefix = len(layers)
    if not 0 <= prefix <= len(layers):
        raise ValueError(f"prefix {prefix} outside [0, {len(layers)}]")
    shapes = infer_shapes(layers[:prefix], input_shape)
    return sum(layer_macs(layer, s[0]) for layer, s in zip(layers[:prefix], shapes))
