"""Temporal-diversity video representation learning on a small numpy autodiff core."""

from .tensor import NonFiniteError, Tensor, no_grad

__all__ = ["NonFiniteError", "Tensor", "no_grad"]
__version__ = "0.1.0"
