"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Operations that receive at
least one tensor requiring gradients record a lineage node (the parent tensors
and a closure mapping the output gradient to parent gradients). Calling
:meth:`Tensor.backward` on a scalar walks the lineage in reverse topological
order and accumulates ``.grad`` on every leaf that requires gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block (inference, optimiser steps)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        """``dtype`` defaults to 32-bit floats; pass ``np.float64`` for gradient checks."""
        if isinstance(data, Tensor):
            dtype = data.dtype if dtype is None else dtype
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        Tensor.__init__(out, data, dtype=data.dtype)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{op})"

    # -- autodiff ---------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        Without an explicit seed gradient the tensor must be a scalar.
        Repeated calls accumulate; zero leaf grads between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor with no recorded lineage")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self))

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named model tensor. Non-trainable parameters hold running statistics."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _raise_not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- element-wise operations ------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum. Same-shape operands, or a numpy-broadcastable scalar/bias."""
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def add_same(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum that insists on identical shapes (feature merges)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return add(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return Tensor._from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return Tensor._from_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return Tensor._from_op(
        out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean"
    )


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, in argument order."""
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(
                f"concat_channels: N,H,W must agree, got {[tuple(t.shape) for t in tensors]}"
            )
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._from_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)), "concat")
