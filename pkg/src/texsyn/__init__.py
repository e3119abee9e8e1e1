"""Texture synthesis with a transformer spatial GAN and descriptor attention."""

__version__ = "0.1.0"

from .tensor import DomainError, ShapeError, Tensor

__all__ = ["Tensor", "ShapeError", "DomainError", "__version__"]
