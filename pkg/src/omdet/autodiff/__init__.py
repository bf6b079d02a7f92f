"""Dense tensors with tape-based reverse-mode differentiation."""

from omdet.autodiff import functional
from omdet.autodiff.functional import PRIMITIVES, apply_primitive
from omdet.autodiff.gradcheck import gradient_check, gradient_check_params, gradient_pair
from omdet.autodiff.nn import (
    AttentionWeights,
    Conv2d,
    FeedForward,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    MultiHeadSelfAttention,
    Parameter,
    is_parameter,
    mhsa,
)
from omdet.autodiff.tensor import (
    Gradients,
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    no_record,
    precision,
    set_default_dtype,
)

__all__ = [
    "AttentionWeights", "Conv2d", "FeedForward", "Gradients", "GroupNorm", "LayerNorm",
    "Linear", "Module", "MultiHeadSelfAttention", "PRIMITIVES", "Parameter", "Tape",
    "Tensor", "apply_primitive", "as_tensor", "backward", "functional", "get_default_dtype",
    "gradient_check", "gradient_check_params", "gradient_pair", "is_parameter", "mhsa", "no_record", "precision",
    "set_default_dtype",
]
