"""Reverse-mode automatic differentiation over a closed primitive catalog."""

from . import ops
from .gradcheck import grad_check
from .params import (CheckpointError, ParamStore, load_params, read_sidecar,
                     save_params, sidecar_path, write_sidecar)
from .primitives import CATALOG, apply_primitive, primitive_kinds
from .tensor import (AutodiffError, DiffTensor, ShapeMismatchError, Tape,
                     UnknownPrimitiveError, active_tape, backward)

__all__ = [
    "AutodiffError", "CATALOG", "CheckpointError", "DiffTensor",
    "ParamStore", "ShapeMismatchError", "Tape", "UnknownPrimitiveError",
    "active_tape", "apply_primitive", "backward", "grad_check",
    "load_params", "ops", "primitive_kinds", "read_sidecar", "save_params",
    "sidecar_path", "write_sidecar",
]
