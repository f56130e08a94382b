"""Reverse-mode automatic differentiation over dense numpy arrays.

Covers exactly the operations the pruning pipeline needs; there is no
general broadcasting.  A Tensor wraps a contiguous float32/float64 array
and records how it was produced, so ``backward()`` on a scalar walks the
recorded graph once in reverse topological order and accumulates exact
gradients into every leaf that requires them.

All kernels are plain numpy with a fixed reduction order, so identical
inputs produce bitwise-identical outputs.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# Forward/backward outputs are validated against NaN/Inf unless disabled
# for throughput; see set_finite_checks().
_finite_checks = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN/Inf from finite inputs."""


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf validation of op outputs; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def check_finite(array: np.ndarray, context: str) -> None:
    if not _finite_checks:
        return
    # NaN/Inf survive summation, so a finite sum almost always clears the
    # array in one fast pass; the exact scan runs only on suspicion, which
    # also rules out overflow of the sum itself
    if not np.isfinite(array.sum()) and not np.isfinite(array).all():
        raise NonFiniteError(f"non-finite values produced by {context}")


class Tensor:
    """Dense N-d float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, *, name: str | None = None,
                 _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.shape != ():
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, grad in zip(node._parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                check_finite(grad, f"backward of {node.name or 'op'}")
                if parent.grad is None:
                    parent.grad = np.array(grad, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += grad
            if node._parents:
                node.grad = None  # interior grads are not retained


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return list(reversed(order))


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    """Wrap an op result, recording the graph edge only when a parent needs it."""
    check_finite(data, name)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, name=name,
                      _parents=parents, _backward=backward)
    return Tensor(data, name=name)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _coerce_scalar(value, dtype):
    return np.asarray(value, dtype=dtype)[()]


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise arithmetic (tensor-tensor same shape, or tensor-scalar).


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "add")

        def backward(g):
            return g, g

        return make_node(a.data + b.data, (a, b), backward, "add")
    scalar = _coerce_scalar(b, a.data.dtype)

    def backward(g):
        return (g,)

    return make_node(a.data + scalar, (a,), backward, "add_scalar")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "mul")
        a_data, b_data = a.data, b.data

        def backward(g):
            return g * b_data, g * a_data

        return make_node(a_data * b_data, (a, b), backward, "mul")
    scalar = _coerce_scalar(b, a.data.dtype)

    def backward(g):
        return (g * scalar,)

    return make_node(a.data * scalar, (a,), backward, "mul_scalar")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return make_node(-a.data, (a,), backward, "neg")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _same_shape(a, b, "sub")

        def backward(g):
            return g, -g

        return make_node(a.data - b.data, (a, b), backward, "sub")
    return add(a, -b)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: requires strictly positive input")
    a_data = a.data

    def backward(g):
        return (g / a_data,)

    return make_node(np.log(a.data), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: requires non-negative input")
    out = np.sqrt(a.data)

    def backward(g):
        return (g * (0.5 / out),)

    return make_node(out, (a,), backward, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (a,), backward, "sigmoid")


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = a.data.shape

    def backward(g):
        return (np.full(shape, g, dtype=a.data.dtype),)

    return make_node(a.data.sum(), (a,), backward, "sum")


def _add_op(self, other):
    return add(self, other)


def _radd_op(self, other):
    return add(self, other)


def _sub_op(self, other):
    return sub(self, other)


def _rsub_op(self, other):
    return add(neg(self), other)


def _mul_op(self, other):
    return mul(self, other)


def _rmul_op(self, other):
    return mul(self, other)


def _neg_op(self):
    return neg(self)


def _div_op(self, other):
    if isinstance(other, Tensor):
        raise ShapeError("division by a tensor is not supported; divide by a scalar")
    return mul(self, 1.0 / other)


Tensor.__add__ = _add_op
Tensor.__radd__ = _radd_op
Tensor.__sub__ = _sub_op
Tensor.__rsub__ = _rsub_op
Tensor.__mul__ = _mul_op
Tensor.__rmul__ = _rmul_op
Tensor.__neg__ = _neg_op
Tensor.__truediv__ = _div_op
