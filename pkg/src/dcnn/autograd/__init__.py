from dcnn.autograd.gradcheck import check_gradients, finite_diff_grad, relative_error
from dcnn.autograd.rng import RngState
from dcnn.autograd.tensor import (
    DTYPE,
    Tensor,
    compute_dtype,
    grad_enabled,
    no_grad,
    ones,
    reference_precision,
    set_check_finite,
    tensor,
    zeros,
)

__all__ = [
    "DTYPE",
    "RngState",
    "Tensor",
    "check_gradients",
    "compute_dtype",
    "finite_diff_grad",
    "grad_enabled",
    "no_grad",
    "ones",
    "reference_precision",
    "relative_error",
    "set_check_finite",
    "tensor",
    "zeros",
]
