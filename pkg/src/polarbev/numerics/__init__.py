"""Minimal reverse-mode differentiable tensor substrate."""

from . import ops, serialize
from .gradcheck import check_param_grads, finite_diff_grad, max_rel_error
from .ops import (
    add, clip, concat, conv2d, cumsum, custom, div, elementwise, exp, flip, getitem,
    layer_norm, linear, log, matmul, mean, mul, pad, relu, reshape, reverse_cumsum,
    scale, sigmoid, softmax, sparse_matmul, sqrt, square, stack, sub, swapaxes, tanh,
    transpose, upsample2x,
)
from .ops import sum as tsum
from .tensor import (
    ComputationRecord, ContractError, DimensionError, DomainError, NumericError, Tensor,
    as_tensor, backward, grad_enabled, no_grad,
)

__all__ = [
    "Tensor", "ComputationRecord", "backward", "no_grad", "grad_enabled", "as_tensor",
    "DimensionError", "DomainError", "ContractError", "NumericError",
    "finite_diff_grad", "max_rel_error", "check_param_grads",
    "add", "sub", "mul", "div", "scale", "exp", "log", "sqrt", "square", "sigmoid", "tanh",
    "relu", "clip", "elementwise", "tsum", "mean", "softmax", "layer_norm", "matmul",
    "linear", "sparse_matmul", "reshape", "transpose", "swapaxes", "getitem", "concat",
    "stack", "flip", "cumsum", "reverse_cumsum", "pad", "upsample2x", "conv2d", "custom",
    "ops", "serialize",
]
