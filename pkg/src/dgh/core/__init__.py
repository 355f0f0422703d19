"""Dense float tensors with reverse-mode differentiation."""
from . import ops
from .tensor import Graph, NumericError, ShapeError, Tensor, UsageError, as_tensor, backward, forward

__all__ = ["Graph", "NumericError", "ShapeError", "Tensor", "UsageError", "as_tensor",
           "backward", "forward", "ops"]
