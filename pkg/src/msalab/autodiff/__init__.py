"""Reverse-mode automatic differentiation with exact Hessian-vector products."""
from . import ops
from .ops import record_kinks
from .tape import ParamVector, Tape, TapeError, forward, hvp, tape_grad, value_and_grad
from .tensor import (Function, NonFiniteError, Tensor, as_tensor, enable_grad, grad,
                     is_grad_enabled, no_grad, set_grad_enabled)

__all__ = [
    "Function", "NonFiniteError", "ParamVector", "Tape", "TapeError", "Tensor",
    "as_tensor", "enable_grad", "forward", "grad", "hvp", "is_grad_enabled", "no_grad",
    "ops", "record_kinks", "set_grad_enabled", "tape_grad", "value_and_grad",
]
