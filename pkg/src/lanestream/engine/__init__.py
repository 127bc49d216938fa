"""Minimal reverse-mode autodiff engine over float64 numpy arrays."""
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    clip,
    concat,
    cos,
    div,
    embedding_lookup,
    exp,
    inverse_sigmoid,
    is_grad_enabled,
    log,
    matmul,
    mul,
    narrow,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    sqrt,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
    where_constant,
)
from .functional import (
    PROB_EPS,
    binary_cross_entropy,
    cross_entropy,
    dice_loss,
    focal_loss,
    grid_sample_bilinear,
    gru_cell,
    l1_loss,
    layer_norm,
    linear,
    mlp,
    pointwise_pe,
    sinusoid_features,
)
from .params import ParamStore

__all__ = [
    "Tensor", "ParamStore", "no_grad", "is_grad_enabled", "as_tensor",
    "add", "mul", "div", "matmul", "concat", "narrow", "take_rows",
    "embedding_lookup", "reshape", "transpose", "sigmoid", "relu", "tanh",
    "exp", "log", "sqrt", "sin", "cos", "absolute", "clip", "softmax",
    "tsum", "tmean", "where_constant", "inverse_sigmoid",
    "linear", "mlp", "layer_norm", "gru_cell", "grid_sample_bilinear",
    "sinusoid_features", "pointwise_pe", "l1_loss", "cross_entropy",
    "binary_cross_entropy", "focal_loss", "dice_loss", "PROB_EPS",
]
