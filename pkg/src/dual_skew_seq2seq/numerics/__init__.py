from . import ops
from .gradcheck import grad_check, max_relative_error, numeric_gradient
from .tape import Node, Tape, Tensor, backward

__all__ = [
    "ops",
    "Node",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "max_relative_error",
    "numeric_gradient",
]
