"""numpy-backed tensors with reverse-mode autodiff and the NN kernels built on them."""

from .gradcheck import grad_check, grad_check_param, grad_check_sampled
from .ops import (
    ConvSpec,
    bilinear_upsample,
    conv2d,
    gaussian_blur,
    gaussian_kernel_1d,
    pool_channel_descriptor,
    pool_spatial_descriptor,
)
from .serialize import (
    load_tensor,
    save_tensor,
    tensor_from_bytes,
    tensor_from_stream,
    tensor_to_bytes,
)
from .tensor import (
    DEFAULT_DTYPE,
    NumericError,
    ShapeError,
    Tensor,
    absolute,
    add,
    check_finite,
    channel_slice,
    clamp,
    concat_channels,
    div,
    elementwise,
    exp,
    log,
    maximum,
    mean_all,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    shift,
    sigmoid,
    softplus,
    sub,
    sum_all,
    take_cells,
)

__all__ = [
    "DEFAULT_DTYPE",
    "NumericError",
    "ShapeError",
    "Tensor",
    "absolute",
    "add",
    "bilinear_upsample",
    "channel_slice",
    "check_finite",
    "clamp",
    "concat_channels",
    "conv2d",
    "ConvSpec",
    "div",
    "elementwise",
    "exp",
    "gaussian_blur",
    "gaussian_kernel_1d",
    "grad_check",
    "grad_check_param",
    "grad_check_sampled",
    "load_tensor",
    "log",
    "maximum",
    "mean_all",
    "minimum",
    "mul",
    "no_grad",
    "pool_channel_descriptor",
    "pool_spatial_descriptor",
    "relu",
    "reshape",
    "save_tensor",
    "scale",
    "shift",
    "sigmoid",
    "softplus",
    "sub",
    "sum_all",
    "take_cells",
    "tensor_from_bytes",
    "tensor_from_stream",
    "tensor_to_bytes",
]
