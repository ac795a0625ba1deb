"""Minimal differentiable tensor core (float64, channels-last)."""

from .ops import (activation, add, add_n, avg_pool2d, concat, conv2d, cross_entropy, dense,
                  global_pool, layer_norm, matmul, mean, mul, relu, reshape, scale, sigmoid,
                  softmax, spatial_pool_over_channels, sub, sum_all, transpose)
from .gradcheck import GradCheckResult, sampled_gradient_check
from .tape import GradTape, Tensor, as_tensor, backward, finite_diff_grad

__all__ = [
    "GradCheckResult", "GradTape", "Tensor", "activation", "add", "add_n", "as_tensor", "avg_pool2d",
    "backward", "concat", "conv2d", "cross_entropy", "dense", "finite_diff_grad",
    "global_pool", "layer_norm", "matmul", "mean", "mul", "relu", "reshape", "sampled_gradient_check", "scale",
    "sigmoid", "softmax", "spatial_pool_over_channels", "sub", "sum_all", "transpose",
]
