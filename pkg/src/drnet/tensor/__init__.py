"""Dense tensors with reverse-mode differentiation over a fixed primitive set."""

from . import ops
from .gradcheck import check_gradients, finite_difference_check, relative_error
from .kernels import BACKEND
from .ops import forward_primitive, primitive_kinds
from .tensor import Parameter, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "BACKEND",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "check_gradients",
    "finite_difference_check",
    "forward_primitive",
    "ops",
    "primitive_kinds",
    "relative_error",
]
