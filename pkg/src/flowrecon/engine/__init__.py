"""Tensor engine: eager arrays, a single-use tape, parameter storage, FRT1 I/O."""

from . import ops
from .frt import load_archive, read_tensor, save_archive, write_tensor
from .gradcheck import GradCheckReport, check_inputs, grad_check
from .ops import record
from .params import ParameterStore, seeded_rng
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeConsumedError,
    Tensor,
    as_tensor,
    check_finite,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "ops", "record", "Tensor", "Tape", "TapeConsumedError", "ShapeError", "NonFiniteError",
    "ParameterStore", "seeded_rng", "grad_check", "check_inputs", "GradCheckReport",
    "read_tensor", "write_tensor", "save_archive", "load_archive", "as_tensor",
    "no_grad", "precision", "check_finite", "default_dtype", "set_default_dtype",
]
