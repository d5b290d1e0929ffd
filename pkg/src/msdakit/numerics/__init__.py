"""Differentiable numeric core: tensors, the optimizer, deterministic
randomness, and the finite-difference gradient checker."""

from .gradcheck import CoordinateFailure, GradCheckReport, grad_check
from .optim import Param, adam_step, zero_grads
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    batch_norm_eval,
    batch_norm_train,
    clamp,
    class_distance_matrix,
    concat_cols,
    cross_entropy,
    euclidean_dist,
    exp,
    grad_reverse,
    leaky_relu,
    log,
    matmul,
    mean_all,
    mul,
    no_grad,
    scale,
    sigmoid,
    slice_cols,
    softmax_rows,
    sqrt0,
    square,
    sum_all,
    sum_rows,
    take_rows,
    transpose,
)

__all__ = [
    "CoordinateFailure",
    "GradCheckReport",
    "grad_check",
    "Param",
    "adam_step",
    "zero_grads",
    "Rng",
    "Tensor",
    "add",
    "batch_norm_eval",
    "batch_norm_train",
    "clamp",
    "class_distance_matrix",
    "concat_cols",
    "cross_entropy",
    "euclidean_dist",
    "exp",
    "grad_reverse",
    "leaky_relu",
    "log",
    "matmul",
    "mean_all",
    "mul",
    "no_grad",
    "scale",
    "sigmoid",
    "slice_cols",
    "softmax_rows",
    "sqrt0",
    "square",
    "sum_all",
    "sum_rows",
    "take_rows",
    "transpose",
]
