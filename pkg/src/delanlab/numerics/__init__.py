"""Dense array math with reverse-mode differentiation for the whole lab."""

from .functional import (
    EmptySupportError,
    layer_norm,
    linear,
    log_softmax,
    masked_softmax,
    matmul,
    mean_pool,
    softmax,
)
from .gradcheck import GradientReport, grad_check
from .tensor import Tensor, as_tensor, concat, gather_rows, grad_enabled, no_grad, stack, tensor

__all__ = [
    "EmptySupportError",
    "GradientReport",
    "Tensor",
    "as_tensor",
    "concat",
    "gather_rows",
    "grad_check",
    "grad_enabled",
    "layer_norm",
    "linear",
    "log_softmax",
    "masked_softmax",
    "matmul",
    "mean_pool",
    "no_grad",
    "softmax",
    "stack",
    "tensor",
]
