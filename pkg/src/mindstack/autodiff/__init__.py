"""Minimal reverse-mode automatic differentiation over float64 numpy tensors."""
from .tape import AutodiffError, Node, Tape, as_tensor
from . import ops
from .ops import record

__all__ = ["AutodiffError", "Node", "Tape", "as_tensor", "ops", "record"]
