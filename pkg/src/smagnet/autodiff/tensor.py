"""Tensor type, graph recording, and the backward pass.

Design follows the classic scalar-autograd recipe, vectorized: every op
returns a new Tensor holding references to its parents and a closure that
maps the incoming output gradient to per-parent gradient arrays. Gradients
are propagated through a per-call dictionary so repeated ``backward()``
calls accumulate cleanly into leaf ``.grad`` buffers.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used when wrapping non-float data (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"default dtype must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that suspends graph recording (eval-time forward)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus an optional gradient and a record of how it was made.

    ``grad`` is populated on leaf tensors (those not produced by an op) with
    ``requires_grad=True``; intermediate gradients live only inside the
    backward pass. Backward rules must never mutate gradient arrays they
    receive or return.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction used by ops ------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), float(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mul(tsum(self), 1.0 / self.data.size)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from this scalar; accumulates into leaf grads."""
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar root, got shape {self.data.shape}"
            )
        graph = Graph.trace(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in graph.nodes:  # reverse topological: root first
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                parts = node._backward(g)
                for parent, pg in zip(node._parents, parts):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    # fresh array on accumulation: parts may alias each other
                    grads[id(parent)] = pg if prev is None else prev + pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


class Graph:
    """Reverse-topologically ordered record of the ops behind a tensor."""

    __slots__ = ("nodes",)

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen = {id(root)}
        stack: list[tuple[Tensor, object]] = [(root, iter(root._parents))]
        while stack:
            node, parents = stack[-1]
            pushed = False
            for p in parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    pushed = True
                    break
            if not pushed:
                stack.pop()
                order.append(node)
        order.reverse()
        return Graph(order)

    def __len__(self):
        return len(self.nodes)


# -- elementwise / broadcast arithmetic (the `add`/`mul` binary ops) ---------


def _as_operands(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        return a, b, None
    return a, None, float(b)


def _broadcast_check(sa: tuple, sb: tuple) -> None:
    # equal shapes, or one operand carries channel extent 1 on axis 1 with
    # matching batch/spatial extents; anything else is rejected outright.
    if sa == sb:
        return
    if len(sa) == len(sb) and len(sa) >= 2:
        if all(
            x == y or (i == 1 and 1 in (x, y)) for i, (x, y) in enumerate(zip(sa, sb))
        ):
            return
    raise ValueError(f"operands are not broadcast-compatible: {sa} vs {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a, b) -> Tensor:
    a, bt, scalar = _as_operands(a, b)
    if bt is None:
        out = Tensor._from_op(a.data + scalar, (a,), lambda g: (g,))
        return out
    _broadcast_check(a.data.shape, bt.data.shape)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, bt.data.shape)

    return Tensor._from_op(a.data + bt.data, (a, bt), backward)


def mul(a, b) -> Tensor:
    a, bt, scalar = _as_operands(a, b)
    if bt is None:
        out = Tensor._from_op(a.data * scalar, (a,), lambda g: (g * scalar,))
        return out
    _broadcast_check(a.data.shape, bt.data.shape)
    ad, bd = a.data, bt.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, bt), backward)


def tsum(x: Tensor) -> Tensor:
    shape = x.data.shape
    total = np.asarray(x.data.sum(dtype=x.data.dtype)).reshape(())

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape),)

    return Tensor._from_op(total, (x,), backward)
