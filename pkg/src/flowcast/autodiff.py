"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array (row-major, 64-bit reals) together
with the bookkeeping needed for reverse-mode differentiation: the parent
tensors that produced it and a closure that pushes the output adjoint back
onto those parents.  The computation record is therefore materialized as
the DAG of parent links; :func:`backward` linearizes it into topological
order and applies the chain rule node by node.  Gradients accumulate
additively, so using a tensor in several places yields the sum of all
path gradients.

Supported structure is deliberately small: 2-D matrix products, a fixed
set of elementwise primitives, column splitting/concatenation, axis sums,
and the row/column replication ops the batched models need.  Binary
elementwise ops require equal shapes or a trailing vector (shape ``(n,)``
or ``(1, n)``) broadcast over the rows of an ``(m, n)`` operand; nothing
wider.  Recorded tensors are never mutated in place, which keeps every
backward rule auditable against its forward line.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, DimensionError, DomainError

Array = np.ndarray


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense n-d array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[Array], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def param(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def _result(data: Array, parents: tuple["Tensor", ...],
                backprop: Callable[[Array], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad or p._backprop is not None for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backprop = backprop
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad and self._backprop is None:
            return  # constant: no adjoint needed
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(_lift(other, self), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        """Sum of all elements, as a scalar tensor."""
        out_data = np.asarray(self.data.sum())
        shape = self.data.shape

        def backprop(g: Array) -> None:
            self._accumulate(np.broadcast_to(g, shape).astype(np.float64))

        return Tensor._result(out_data, (self,), backprop)

    def sum_cols(self) -> "Tensor":
        """Row sums of a 2-D tensor, shape ``(m, 1)``."""
        if self.data.ndim != 2:
            raise DimensionError(f"sum_cols needs a 2-D tensor, got shape {self.shape}")
        out_data = self.data.sum(axis=1, keepdims=True)
        ncols = self.data.shape[1]

        def backprop(g: Array) -> None:
            self._accumulate(np.repeat(g, ncols, axis=1))

        return Tensor._result(out_data, (self,), backprop)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def square(self) -> "Tensor":
        return square(self)


def _lift(x, like: Tensor) -> Tensor:
    """Promote a python scalar (or array) to a constant tensor shaped like ``like``."""
    if isinstance(x, Tensor):
        return x
    arr = _as_f64(x)
    if arr.shape == ():
        arr = np.full_like(like.data, float(arr))
    return Tensor(arr)


def _broadcast_rule(a: Tensor, b: Tensor) -> None:
    """Equal shapes, or one operand a trailing vector over the other's rows."""
    if a.shape == b.shape:
        return
    for x, y in ((a, b), (b, a)):
        if x.data.ndim == 2 and _is_trailing_vector(y, x.shape[1]):
            return
    raise DimensionError(f"elementwise shapes {a.shape} and {b.shape} are incompatible")


def _is_trailing_vector(t: Tensor, n: int) -> bool:
    return t.shape == (n,) or t.shape == (1, n)


def _reduce_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    r = g.sum(axis=0)
    return r.reshape(shape)


# -- primitive operations ------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = a, _lift(b, a)
    _broadcast_rule(a, b)
    out_data = a.data + b.data

    def backprop(g: Array) -> None:
        a._accumulate(_reduce_to_shape(g, a.shape))
        b._accumulate(_reduce_to_shape(g, b.shape))

    return Tensor._result(out_data, (a, b), backprop)


def sub(a: Tensor, b) -> Tensor:
    a, b = a, _lift(b, a)
    _broadcast_rule(a, b)
    out_data = a.data - b.data

    def backprop(g: Array) -> None:
        a._accumulate(_reduce_to_shape(g, a.shape))
        b._accumulate(_reduce_to_shape(-g, b.shape))

    return Tensor._result(out_data, (a, b), backprop)


def mul(a: Tensor, b) -> Tensor:
    a, b = a, _lift(b, a)
    _broadcast_rule(a, b)
    out_data = a.data * b.data
    a_data, b_data = a.data, b.data

    def backprop(g: Array) -> None:
        a._accumulate(_reduce_to_shape(g * b_data, a.shape))
        b._accumulate(_reduce_to_shape(g * a_data, b.shape))

    return Tensor._result(out_data, (a, b), backprop)


def neg(a: Tensor) -> Tensor:
    def backprop(g: Array) -> None:
        a._accumulate(-g)

    return Tensor._result(-a.data, (a,), backprop)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backprop(g: Array) -> None:
        a._accumulate(g * out_data)

    return Tensor._result(out_data, (a,), backprop)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out_data = np.log(a.data)
    a_data = a.data

    def backprop(g: Array) -> None:
        a._accumulate(g / a_data)

    return Tensor._result(out_data, (a,), backprop)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backprop(g: Array) -> None:
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor._result(out_data, (a,), backprop)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to stay overflow-free in both tails.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backprop(g: Array) -> None:
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (a,), backprop)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0.0):
        raise DomainError("reciprocal of zero")
    out_data = 1.0 / a.data

    def backprop(g: Array) -> None:
        a._accumulate(-g * out_data * out_data)

    return Tensor._result(out_data, (a,), backprop)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data
    a_data = a.data

    def backprop(g: Array) -> None:
        a._accumulate(g * 2.0 * a_data)

    return Tensor._result(out_data, (a,), backprop)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul requires 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backprop(g: Array) -> None:
        a._accumulate(g @ b_data.T)
        b._accumulate(a_data.T @ g)

    return Tensor._result(out_data, (a, b), backprop)


def concat_cols(tensors: Iterable[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    ts = list(tensors)
    if not ts:
        raise ContractError("concat_cols needs at least one tensor")
    for t in ts:
        if t.data.ndim != 2:
            raise DimensionError(f"concat_cols needs 2-D tensors, got {t.shape}")
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row counts disagree: {sorted(rows)}")
    out_data = np.concatenate([t.data for t in ts], axis=1)
    widths = [t.shape[1] for t in ts]

    def backprop(g: Array) -> None:
        offset = 0
        for t, w in zip(ts, widths):
            t._accumulate(g[:, offset:offset + w])
            offset += w

    return Tensor._result(out_data, tuple(ts), backprop)


def split_cols(t: Tensor, sizes: Iterable[int]) -> list[Tensor]:
    """Split a 2-D tensor into column blocks of the given widths."""
    sizes = list(sizes)
    if t.data.ndim != 2:
        raise DimensionError(f"split_cols needs a 2-D tensor, got {t.shape}")
    if sum(sizes) != t.shape[1]:
        raise DimensionError(
            f"split sizes {sizes} do not cover {t.shape[1]} columns")
    outs: list[Tensor] = []
    offset = 0
    for w in sizes:
        lo = offset
        outs.append(_slice_cols(t, lo, lo + w))
        offset += w
    return outs


def _slice_cols(t: Tensor, lo: int, hi: int) -> Tensor:
    out_data = t.data[:, lo:hi].copy()
    shape = t.data.shape

    def backprop(g: Array) -> None:
        full = np.zeros(shape)
        full[:, lo:hi] = g
        t._accumulate(full)

    return Tensor._result(out_data, (t,), backprop)


def tile_cols(t: Tensor, reps: int) -> Tensor:
    """Repeat a 2-D tensor's whole column block ``reps`` times: ``(m,n) -> (m, reps*n)``."""
    if t.data.ndim != 2:
        raise DimensionError(f"tile_cols needs a 2-D tensor, got {t.shape}")
    out_data = np.tile(t.data, (1, reps))
    m, n = t.shape

    def backprop(g: Array) -> None:
        t._accumulate(g.reshape(m, reps, n).sum(axis=1))

    return Tensor._result(out_data, (t,), backprop)


def sum_col_groups(t: Tensor, group: int) -> Tensor:
    """Sum consecutive column groups of width ``group``: ``(m, k*group) -> (m, k)``."""
    if t.data.ndim != 2 or t.shape[1] % group != 0:
        raise DimensionError(
            f"sum_col_groups needs columns divisible by {group}, got {t.shape}")
    m, n = t.shape
    k = n // group
    out_data = t.data.reshape(m, k, group).sum(axis=2)

    def backprop(g: Array) -> None:
        t._accumulate(np.repeat(g, group, axis=1))

    return Tensor._result(out_data, (t,), backprop)


def repeat_rows(t: Tensor, reps: int) -> Tensor:
    """Repeat each row ``reps`` times: ``(m, n) -> (m*reps, n)``."""
    if t.data.ndim != 2:
        raise DimensionError(f"repeat_rows needs a 2-D tensor, got {t.shape}")
    out_data = np.repeat(t.data, reps, axis=0)
    m, n = t.shape

    def backprop(g: Array) -> None:
        t._accumulate(g.reshape(m, reps, n).sum(axis=1))

    return Tensor._result(out_data, (t,), backprop)


_ELEMENTWISE_UNARY = {
    "neg": neg, "exp": exp, "log": log, "tanh": tanh,
    "sigmoid": sigmoid, "square": square,
}
_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a named elementwise primitive; binary ops take two operands."""
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return _ELEMENTWISE_UNARY[op](a)
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ContractError(f"{op} is binary")
        return _ELEMENTWISE_BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- backward pass --------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """Linearize the computation record so every op's inputs precede it."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, Array]:
    """Run reverse-mode differentiation from a scalar loss.

    Populates ``.grad`` on every reachable tensor with ``requires_grad`` and
    returns a map from ``id(tensor)`` to its gradient array.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss._accumulate(np.ones_like(loss.data))
    grads: dict[int, Array] = {}
    for node in reversed(order):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)
        if node.requires_grad and node._backprop is None and node.grad is not None:
            grads[id(node)] = node.grad
    return grads


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# -- initialization -------------------------------------------------------------


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Weight init uniform in +/- sqrt(1/fan_in)."""
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return Tensor.param(rng.uniform(-bound, bound, size=shape))


def zeros_init(shape: tuple[int, ...]) -> Tensor:
    return Tensor.param(np.zeros(shape))
