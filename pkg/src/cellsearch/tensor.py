"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array (float32 or float64) and
remembers how it was produced.  Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into every tensor created with ``requires_grad=True``.  Gradients
add up across repeated backward calls until cleared.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """A tensor shape violates an operation's contract."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Node of the differentiation graph.

    ``_parents`` are the tensors this one was computed from and ``_backward``
    maps the incoming gradient to one contribution per parent (``None`` for
    parents that need no gradient).  Leaf tensors have neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], tuple]] = None,
    ):
        self.data = _as_float_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite values in {what} (shape {self.shape})")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(node) into ``grad`` of every reachable node.

        ``self`` must hold a single element.  Contributions of this call are
        added to whatever ``grad`` already holds, so two calls on the same
        graph double the gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return

        # Post-order DFS; parents precede children, so the reversed list is
        # a valid backward order.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))

        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            contributions = node._backward(g)
            for parent, contrib in zip(node._parents, contributions):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + contrib
                else:
                    flows[key] = contrib

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def bwd(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return Tensor(out, True, _parents=(a, b), _backward=bwd)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        # scalar (or array constant) factor
        a = as_tensor(a)
        factor = b
        out = a.data * factor
        if not a.requires_grad:
            return Tensor(out)
        return Tensor(out, True, _parents=(a,), _backward=lambda g: (g * factor,))
    a = as_tensor(a)
    out = a.data * b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return Tensor(out, True, _parents=(a, b), _backward=bwd)


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum()
    if not x.requires_grad:
        return Tensor(out)

    def bwd(g):
        full = np.empty_like(x.data)
        full[...] = g
        return (full,)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = x.data.mean()
    if not x.requires_grad:
        return Tensor(out)

    def bwd(g):
        full = np.empty_like(x.data)
        full[...] = g / n
        return (full,)

    return Tensor(out, True, _parents=(x,), _backward=bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    if not x.requires_grad:
        return Tensor(out)
    return Tensor(out, True, _parents=(x,), _backward=lambda g: (g.reshape(x.data.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def bwd(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return Tensor(out, True, _parents=(a, b), _backward=bwd)


def dump_tensor(x: Tensor, path) -> None:
    """Debug dump: one shape header line, then one value per line."""
    with open(path, "w") as fh:
        fh.write(" ".join(str(d) for d in x.shape) + "\n")
        for v in x.data.reshape(-1):
            fh.write(repr(float(v)) + "\n")
