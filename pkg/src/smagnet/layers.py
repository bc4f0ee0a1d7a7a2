"""Parameter initialization and small layer helpers shared by the nets.

Components keep flat ``dict[str, Tensor]`` parameter maps with dotted keys
and a parallel ``dict[str, np.ndarray]`` for normalization running state; the
model assembler prefixes these into the checkpoint namespace.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ops


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_conv(
    params: dict,
    rng: np.random.Generator,
    key: str,
    cout: int,
    cin: int,
    k: int,
    dtype,
    bias: bool = False,
    transpose: bool = False,
) -> None:
    shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
    params[f"{key}.w"] = Tensor(
        uniform_fan_in(rng, shape, cin * k * k, dtype), requires_grad=True
    )
    if bias:
        params[f"{key}.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True)


def init_norm(params: dict, state: dict, key: str, c: int, dtype) -> None:
    params[f"{key}.gamma"] = Tensor(np.ones(c, dtype), requires_grad=True)
    params[f"{key}.beta"] = Tensor(np.zeros(c, dtype), requires_grad=True)
    state[f"{key}.running_mean"] = np.zeros(c, dtype)
    state[f"{key}.running_var"] = np.ones(c, dtype)


def apply_norm(params: dict, state: dict, key: str, x: Tensor, training: bool) -> Tensor:
    return ops.norm_layer(
        x,
        params[f"{key}.gamma"],
        params[f"{key}.beta"],
        state[f"{key}.running_mean"],
        state[f"{key}.running_var"],
        mode="batch_stats" if training else "running_stats",
    )


def conv(params: dict, key: str, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return ops.conv2d(x, params[f"{key}.w"], params.get(f"{key}.b"), stride=stride, pad=pad)
