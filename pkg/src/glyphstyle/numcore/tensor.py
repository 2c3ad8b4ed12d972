"""Dense tensor with a reverse-mode tape.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure that pushes the output gradient back to them.
:meth:`Tensor.backward` walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of operands are incompatible with the op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached an op boundary while checked mode was on."""


class _Mode(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.checked = False
        self.dtype = np.float32


_mode = _Mode()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    prev = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = prev


@contextlib.contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    """64-bit default dtype and finiteness checks at every op boundary."""
    prev = (_mode.checked, _mode.dtype)
    _mode.checked = enabled
    _mode.dtype = np.float64 if enabled else prev[1]
    try:
        yield
    finally:
        _mode.checked, _mode.dtype = prev


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


def is_checked() -> bool:
    return _mode.checked


def default_dtype() -> type:
    return _mode.dtype


def set_default_dtype(dtype) -> None:
    _mode.dtype = np.dtype(dtype).type


class Tensor:
    """N-d float array plus optional gradient buffer and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (None if _is_float(data) else default_dtype()))
        if arr.dtype.kind != "f":
            arr = arr.astype(default_dtype())
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"all dimensions must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name
        if _mode.checked:
            _check_finite(arr, "tensor construction")

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- tape -------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        ``grad`` defaults to ones for a single-element tensor; for anything
        larger it must be supplied.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() on a non-scalar tensor needs an explicit grad")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)


def _is_float(data) -> bool:
    return isinstance(data, np.ndarray) and data.dtype.kind == "f"


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
    op_name: str,
) -> Tensor:
    """Wrap an op's output, recording it on the tape when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _mode.checked:
        _check_finite(data, op_name)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))
