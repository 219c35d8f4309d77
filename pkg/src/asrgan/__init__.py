"""Attentional super-resolution GAN with flexible (pooled) self-attention."""

from .tensor import Tensor, backward, grad, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad", "no_grad", "__version__"]
