"""Masked self-supervised monocular depth estimation at desk scale.

A from-scratch reverse-mode autodiff core drives a toy vision transformer
that learns depth and ego-motion from synthetic video triplets through
view synthesis, with blockwise token masking and a robustness harness.
"""

from .tensor import DomainError, GraphReleasedError, ShapeError, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "no_grad", "ShapeError", "DomainError", "GraphReleasedError", "__version__"]
