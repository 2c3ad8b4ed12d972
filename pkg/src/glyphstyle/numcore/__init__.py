"""Small dense-tensor library with reverse-mode autodiff."""
from . import ops
from ._kernels import BACKEND as KERNEL_BACKEND
from .gradcheck import ContractError, grad_check
from .ops import (
    avgpool2x2,
    concat,
    conv2d,
    global_avg_pool,
    instance_norm,
    matmul,
    permute,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_rows,
    upsample_nearest2x,
)
from .tensor import (
    DimensionError,
    NonFiniteError,
    Tensor,
    checked_mode,
    default_dtype,
    is_checked,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "KERNEL_BACKEND",
    "ContractError",
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "avgpool2x2",
    "checked_mode",
    "concat",
    "conv2d",
    "default_dtype",
    "global_avg_pool",
    "grad_check",
    "instance_norm",
    "is_checked",
    "matmul",
    "no_grad",
    "ops",
    "permute",
    "relu",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "softmax_rows",
    "upsample_nearest2x",
]
