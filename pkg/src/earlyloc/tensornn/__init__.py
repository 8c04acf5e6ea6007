"""Minimal NHWC tensor engine: valid convolutions, pooling, dense layers, SGD."""

from .kernels import BACKEND
from .layers import (
    LayerSpec,
    ShapeError,
    conv,
    dense,
    depthwise,
    flatten,
    infer_shapes,
    layer_macs,
    layer_params,
    mac_count,
    maxpool,
    output_shape,
    param_count,
    pointwise,
    relu,
    softmax,
)
from .network import (
    GradientStore,
    TrainingDiverged,
    WeightStore,
    backward,
    check_weights,
    forward,
    init_weights,
    layer_blocks,
    predict,
    sgd_step,
    train_sgd,
)
from . import ops

__all__ = [
    "BACKEND",
    "GradientStore",
    "LayerSpec",
    "ShapeError",
    "TrainingDiverged",
    "WeightStore",
    "backward",
    "check_weights",
    "conv",
    "dense",
    "depthwise",
    "flatten",
    "forward",
    "infer_shapes",
    "init_weights",
    "layer_blocks",
    "layer_macs",
    "layer_params",
    "mac_count",
    "maxpool",
    "ops",
    "output_shape",
    "param_count",
    "pointwise",
    "predict",
    "relu",
    "sgd_step",
    "softmax",
    "train_sgd",
]
