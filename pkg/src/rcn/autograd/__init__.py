"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .functional import (
    add, concat, conv2d, cross_correlate, fully_connected, hadamard, index, max_pool2d,
    mean, one_minus, pointwise, relu, reshape, scale, sigmoid, sigmoid_cross_entropy,
    split, stack, sub, sum, tanh,
)
from .params import ParamStore, read_checkpoint, sgd_step, write_checkpoint
from .tensor import ComputeGraph, Tensor, backward, build_graph, grad_enabled, no_grad, tensor

__all__ = [
    "Tensor", "tensor", "no_grad", "grad_enabled", "backward", "build_graph", "ComputeGraph", "ParamStore", "sgd_step",
    "write_checkpoint", "read_checkpoint", "add", "sub", "hadamard", "scale", "one_minus",
    "sigmoid", "tanh", "relu", "pointwise", "sum", "mean", "reshape", "index", "concat",
    "stack", "split", "fully_connected", "conv2d", "max_pool2d", "cross_correlate",
    "sigmoid_cross_entropy",
]
