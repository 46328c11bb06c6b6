"""Autodiff substrate: tensors, parameter stores, Adam, EMA and gradient checks."""
from .autodiff import (NonFiniteError, Tensor, add, as_tensor, backward, concat, default_dtype,
                       gelu, layernorm, matmul, mean, mul, precision, reshape, sigmoid, silu,
                       softmax, sub, sum_, take, transpose)
from .gradcheck import GradCheckEntry, GradCheckReport, NondeterminismError, grad_check
from .optim import AdamState, adam_step, ema_update, grad_norm
from .params import Binding, Group, ParamStore

__all__ = [
    "AdamState", "Binding", "GradCheckEntry", "GradCheckReport", "Group", "NonFiniteError",
    "NondeterminismError", "ParamStore", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "concat", "default_dtype", "ema_update", "gelu", "grad_check", "grad_norm", "layernorm",
    "matmul", "mean", "mul", "precision", "reshape", "sigmoid", "silu", "softmax", "sub", "sum_",
    "take", "transpose",
]
