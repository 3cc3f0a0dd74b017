"""Reverse-mode differentiation over dense float64 matrices."""

from . import tensor
from .checkpoint import CheckpointError
from .gradcheck import NonDeterministicError, grad_check, relative_error
from .layers import ParamStore
from .optim import OptimizerMisuse, OptimizerState, adam_step
from .tensor import DimensionError, Node, NumericsError, constant, parameter

__all__ = [
    "CheckpointError",
    "DimensionError",
    "Node",
    "NonDeterministicError",
    "NumericsError",
    "OptimizerMisuse",
    "OptimizerState",
    "ParamStore",
    "adam_step",
    "constant",
    "grad_check",
    "parameter",
    "relative_error",
    "tensor",
]
