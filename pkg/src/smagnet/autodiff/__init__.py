"""Reverse-mode automatic differentiation over numpy arrays.

The engine records an implicit DAG as ops execute; ``Tensor.backward()``
replays it once in reverse topological order, accumulating gradients
additively across fan-out.
"""

from .tensor import Tensor, Graph, no_grad, set_default_dtype, default_dtype
from .ops import (
    conv2d,
    conv_transpose2d,
    pool2d,
    relu,
    sigmoid,
    concat_channels,
    norm_layer,
    bce_with_logits,
)
from .gradcheck import grad_check, standard_cases, OP_REGISTRY

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "conv2d",
    "conv_transpose2d",
    "pool2d",
    "relu",
    "sigmoid",
    "concat_channels",
    "norm_layer",
    "bce_with_logits",
    "grad_check",
    "standard_cases",
    "OP_REGISTRY",
]
