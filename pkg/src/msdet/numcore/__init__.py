"""Minimal float64 tensor arithmetic with reverse-mode differentiation."""
from .gradcheck import grad_check
from .optim import Adam
from .params import Parameter, ParameterSet, read_snapshot, write_snapshot
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    bilinear_sample,
    clamp,
    concat,
    div,
    exact_gradients,
    exp,
    getitem,
    inverse_sigmoid,
    layer_norm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    refine_logit,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [
    "Adam", "Parameter", "ParameterSet", "Tensor", "add", "as_tensor", "backward",
    "bilinear_sample", "clamp", "concat", "div", "exact_gradients", "exp", "getitem",
    "grad_check", "inverse_sigmoid", "layer_norm", "log", "matmul", "maximum", "mean",
    "minimum", "mul", "no_grad", "read_snapshot", "refine_logit", "relu", "reshape", "sigmoid", "softmax",
    "square", "stack", "sub", "tabs", "tanh", "transpose", "tsum", "where", "write_snapshot",
]
