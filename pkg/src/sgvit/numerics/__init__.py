"""Tensor math, autodiff, Adam and checkpoint I/O."""

from .checkpoint import load_arrays, save_arrays
from .gradcheck import grad_check, gradients, relative_error
from .nn import MLP, LayerNorm, Linear, Module, parameter, trunc_normal
from .optim import OptimizerState, adam_step, cosine_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    check_finite,
    concat,
    div,
    exp,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    precision,
    reshape,
    sigmoid,
    sigmoid_cross_entropy,
    sigmoid_np,
    softmax,
    stack,
    stop_gradient,
    tabs,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "MLP", "LayerNorm", "Linear", "Module", "OptimizerState", "Tensor", "adam_step", "add",
    "as_tensor", "check_finite", "concat", "cosine_lr", "div", "exp", "gelu", "getitem", "grad_check",
    "gradients", "l2_normalize", "layer_norm", "load_arrays", "matmul", "maximum", "mean",
    "minimum", "mul", "no_grad", "parameter", "precision", "relative_error", "reshape",
    "save_arrays", "sigmoid", "sigmoid_cross_entropy", "sigmoid_np", "softmax", "stack",
    "stop_gradient", "tabs", "tanh", "transpose", "trunc_normal", "tsum",
]
