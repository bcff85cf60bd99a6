from .gradcheck import gradcheck, numeric_gradient, relative_error
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    causal_mask_fill,
    cross_entropy,
    default_dtype,
    embedding_lookup,
    gelu,
    kl_gaussian_sum,
    layer_norm,
    matmul,
    mul,
    no_grad,
    precision,
    reparameterize,
    reshape,
    scale,
    softmax,
    softplus,
    take,
    transpose,
)

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "causal_mask_fill",
    "cross_entropy",
    "default_dtype",
    "embedding_lookup",
    "gelu",
    "gradcheck",
    "kl_gaussian_sum",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "numeric_gradient",
    "precision",
    "relative_error",
    "reparameterize",
    "reshape",
    "scale",
    "softmax",
    "softplus",
    "take",
    "transpose",
]
