"""Dual-encoder SAR/MSI segmentation with spatially masked gated fusion.

Everything numeric runs on a small reverse-mode autodiff engine over numpy
arrays (see :mod:`smagnet.autodiff`); no external deep-learning framework is
involved.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
