"""Minimal deterministic neural-network kernel."""

from splitvfl.nn.gradcheck import grad_check, numeric_gradient, relative_error
from splitvfl.nn.layers import (
    Cache,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    Stack,
    backward,
    forward,
    init_params,
)
from splitvfl.nn.loss import softmax_cross_entropy
from splitvfl.nn.optim import OptimizerConfig, sgd_step
from splitvfl.nn.params import Parameter, ParameterStore, as_tensor, check_finite

__all__ = [
    "Cache", "Conv2d", "Dense", "Flatten", "GlobalAvgPool", "Layer", "MaxPool2d", "OptimizerConfig",
    "Parameter", "ParameterStore", "ReLU", "ResidualBlock", "Stack", "as_tensor", "backward",
    "check_finite", "forward", "grad_check", "init_params", "numeric_gradient", "relative_error",
    "sgd_step", "softmax_cross_entropy",
]
