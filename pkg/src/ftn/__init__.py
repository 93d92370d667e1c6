"""Fully Transformer Network for semantic segmentation, on a numpy autodiff core."""

from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "backward", "no_grad", "__version__"]
