from chunkcast.numerics.functional import masked_attention
from chunkcast.numerics.gradcheck import finite_diff_gradient, max_relative_error
from chunkcast.numerics.optim import Adam
from chunkcast.numerics.tensor import (
    ParamSet,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Adam",
    "ParamSet",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "finite_diff_gradient",
    "grad_enabled",
    "masked_attention",
    "max_relative_error",
    "no_grad",
    "set_default_dtype",
]
