"""Finite-difference gradient verification and the op registry.

``OP_REGISTRY`` maps each differentiable op to a factory that builds small
random 64-bit test cases; ``standard_cases`` instantiates one case per op so
callers can sweep the whole engine.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor
from . import ops


def grad_check(fn, inputs: list[Tensor], step: float = 1e-3) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a scalar Tensor and be state-free enough to
    re-evaluate; error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check closure must return a scalar, got {out.data.shape}")
    for t in inputs:
        t.zero_grad()
    out.backward()
    checked = [t for t in inputs if t.requires_grad]
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in checked
    ]
    worst = 0.0
    for t, an in zip(checked, analytic):
        flat = t.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*inputs).item()
            flat[i] = orig - step
            lo = fn(*inputs).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


def _t(rng: np.random.Generator, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape).astype(np.float64), requires_grad=True)


def _distinct(rng: np.random.Generator, *shape) -> Tensor:
    """Values with pairwise gaps far above the FD step, for max-pool ties."""
    n = int(np.prod(shape))
    vals = rng.permutation(np.linspace(-3.0, 3.0, n)).reshape(shape)
    return Tensor(vals.astype(np.float64), requires_grad=True)


def _case_conv2d(rng):
    x = _t(rng, 2, 3, 6, 6)
    w = _t(rng, 4, 3, 3, 3)
    b = _t(rng, 4)
    stride = int(rng.integers(1, 3))
    return lambda x, w, b: ops.conv2d(x, w, b, stride=stride, pad=1).sum(), [x, w, b]


def _case_conv_transpose2d(rng):
    x = _t(rng, 2, 3, 4, 4)
    w = _t(rng, 3, 2, 2, 2)
    b = _t(rng, 2)
    return lambda x, w, b: ops.conv_transpose2d(x, w, b, stride=2).sum(), [x, w, b]


def _case_pool_max(rng):
    x = _distinct(rng, 2, 2, 6, 6)
    return lambda x: ops.pool2d("max", x, 2, 2).sum(), [x]


def _case_pool_avg(rng):
    x = _t(rng, 2, 3, 6, 6)
    return lambda x: ops.pool2d("avg", x, 3, 1).sum(), [x]


def _case_relu(rng):
    # keep coordinates away from the kink at 0
    data = rng.uniform(0.1, 1.5, (3, 4, 5, 5)) * rng.choice([-1.0, 1.0], (3, 4, 5, 5))
    x = Tensor(data.astype(np.float64), requires_grad=True)
    return lambda x: ops.relu(x).sum(), [x]


def _case_sigmoid(rng):
    x = _t(rng, 2, 3, 4, 4, lo=-3, hi=3)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))
    return lambda x: (ops.sigmoid(x) * w).sum(), [x]


def _case_add(rng):
    a = _t(rng, 2, 4, 3, 3)
    b = _t(rng, 2, 1, 3, 3)  # channel broadcast
    w = Tensor(rng.uniform(-1, 1, (2, 4, 3, 3)))
    return lambda a, b: ((a + b) * w).sum(), [a, b]


def _case_mul(rng):
    a = _t(rng, 2, 4, 3, 3)
    b = _t(rng, 2, 1, 3, 3)
    return lambda a, b: (a * b).sum(), [a, b]


def _case_concat(rng):
    a = _t(rng, 2, 3, 4, 4)
    b = _t(rng, 2, 2, 4, 4)
    w = Tensor(rng.uniform(-1, 1, (2, 5, 4, 4)))
    return lambda a, b: (ops.concat_channels(a, b) * w).sum(), [a, b]


def _case_norm_batch(rng):
    x = _t(rng, 3, 4, 5, 5)
    gamma = _t(rng, 4, lo=0.5, hi=1.5)
    beta = _t(rng, 4)
    w = Tensor(rng.uniform(-1, 1, (3, 4, 5, 5)))

    def fn(x, gamma, beta):
        rm = np.zeros(4)
        rv = np.ones(4)
        return (ops.norm_layer(x, gamma, beta, rm, rv, mode="batch_stats") * w).sum()

    return fn, [x, gamma, beta]


def _case_norm_running(rng):
    x = _t(rng, 2, 3, 4, 4)
    gamma = _t(rng, 3, lo=0.5, hi=1.5)
    beta = _t(rng, 3)
    rm = rng.uniform(-0.5, 0.5, 3)
    rv = rng.uniform(0.5, 1.5, 3)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)))

    def fn(x, gamma, beta):
        return (
            ops.norm_layer(x, gamma, beta, rm.copy(), rv.copy(), mode="running_stats") * w
        ).sum()

    return fn, [x, gamma, beta]


def _case_bce(rng):
    z = _t(rng, 2, 1, 5, 5, lo=-4, hi=4)
    y = Tensor(rng.integers(0, 2, (2, 1, 5, 5)).astype(np.float64))
    return lambda z: ops.bce_with_logits(z, y), [z]


def _case_sum(rng):
    x = _t(rng, 3, 2, 4, 4)
    return lambda x: (x * x).sum(), [x]


OP_REGISTRY: dict = {
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "pool2d_max": _case_pool_max,
    "pool2d_avg": _case_pool_avg,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "add": _case_add,
    "mul": _case_mul,
    "concat_channels": _case_concat,
    "norm_layer_batch": _case_norm_batch,
    "norm_layer_running": _case_norm_running,
    "bce_with_logits": _case_bce,
    "sum": _case_sum,
}


def standard_cases(rng: np.random.Generator):
    """Yield (name, closure, inputs) — one fresh random case per registered op."""
    for name, factory in OP_REGISTRY.items():
        fn, inputs = factory(rng)
        yield name, fn, inputs
