"""Differentiable ops over :class:`Tensor`.

Image ops accept either a single map ``(C, H, W)`` or a batch
``(N, C, H, W)``; the batch axis is what training uses.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .tensor import DimensionError, Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data / b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return make_result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, xs, backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-d table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("take_rows expects a 2-d table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_result(table.data[ids], (table,), backward, "take_rows")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes (if any) are batch axes of equal size."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_result(out, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("softmax_rows expects a 2-d tensor")
    return softmax(x, axis=-1)


# ---------------------------------------------------------------------------
# image ops


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _unbatch(y: Tensor, squeezed: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeezed else y


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation. ``w`` is ``(C_out, C_in, K, K)``."""
    xb, squeezed = _as_batch(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"weight must be (C_out, C_in, K, K), got {w.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError("stride must be >= 1 and pad >= 0")
    n, c, h, wd = xb.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise DimensionError(f"conv2d expects {ci} input channels, got {c}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output size {ho}x{wo} is not positive")
    cols = _kernels.im2col(np.ascontiguousarray(xb.data), k, stride, pad, ho, wo)  # (c*k*k, n*ho*wo)
    wmat = w.data.reshape(co, -1)
    out = wmat @ cols  # one GEMM over the whole batch
    if b is not None:
        out += b.data.reshape(co, 1)
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = wmat.T @ g2
        gx = _kernels.col2im(gcols, n, c, h, wd, k, stride, pad, ho, wo)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (xb, w) if b is None else (xb, w, b)
    return _unbatch(make_result(out, parents, backward, "conv2d"), squeezed)


def avgpool2x2(x: Tensor) -> Tensor:
    xb, squeezed = _as_batch(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x2 needs even spatial size, got {h}x{w}")
    out = _kernels.avgpool2(np.ascontiguousarray(xb.data))

    def backward(g):
        return (_kernels.upsample2(np.ascontiguousarray(g)) * 0.25,)

    return _unbatch(make_result(out, (xb,), backward, "avgpool2x2"), squeezed)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xb, squeezed = _as_batch(x)
    out = _kernels.upsample2(np.ascontiguousarray(xb.data))

    def backward(g):
        return (_kernels.upsample2_backward(np.ascontiguousarray(g)),)

    return _unbatch(make_result(out, (xb,), backward, "upsample_nearest2x"), squeezed)


def global_avg_pool(x: Tensor) -> Tensor:
    """Adaptive average pooling to 1x1, returned flattened as ``(N, C)``."""
    xb, squeezed = _as_batch(x)
    out = mean(xb, axis=(2, 3))
    return reshape(out, out.shape[1:]) if squeezed else out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes (no affine)."""
    xb, squeezed = _as_batch(x)
    d = xb.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _unbatch(make_result(xhat.astype(d.dtype, copy=False), (xb,), backward, "instance_norm"), squeezed)


def l1_distance(a: Tensor, b) -> Tensor:
    """Mean absolute difference."""
    return mean(abs(sub(a, b)))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; the gradient scatters back into zeros."""
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "getitem")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Consecutive pieces of ``x`` along ``axis`` with the given lengths."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise DimensionError(f"sizes {list(sizes)} do not add up to {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out
