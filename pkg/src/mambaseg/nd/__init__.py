"""Array math and reverse-mode differentiation for the segmentation model."""

from . import ops, scan_kernel
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "ops",
    "scan_kernel",
]
