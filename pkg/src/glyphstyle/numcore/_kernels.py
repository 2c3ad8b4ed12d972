"""Hot loops behind conv2d and the pooling ops.

Two interchangeable implementations live here: plain numpy (strided views
plus slice accumulation) and numba ``@njit`` loops. The backend is chosen at
import time from ``GLYPHSTYLE_KERNELS`` (``numba`` or ``numpy``); numba is the
default when importable. Both produce the same values up to summation order.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _requested_backend() -> str:
    name = os.environ.get("GLYPHSTYLE_KERNELS", "numba" if HAVE_NUMBA else "numpy").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"GLYPHSTYLE_KERNELS must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        return "numpy"
    return name


# ---------------------------------------------------------------------------
# numpy path


def im2col_numpy(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Unfold ``x`` (n, c, h, w) into columns ``(c*k*k, n*ho*wo)``; rows in
    (channel, ki, kj) order, columns in (batch, y, x) order. Zero padding is
    applied on the fly."""
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, ki, kj) -> (c, ki, kj, n, ho, wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def col2im_numpy(
    cols: np.ndarray, n: int, c: int, h: int, w: int, k: int, stride: int, pad: int, ho: int, wo: int
) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`: scatter-add columns back to (n, c, h, w)."""
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hspan : stride, j : j + wspan : stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w]) if pad else out


def avgpool2_numpy(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def upsample2_numpy(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward_numpy(g: np.ndarray) -> np.ndarray:
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def im2col_numba(x, k, stride, pad, ho, wo):
        n, c, h, w = x.shape
        p = ho * wo
        out = np.zeros((c * k * k, n * p), dtype=x.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for b in range(n):
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            base = b * p + y * wo
                            for xx in range(wo):
                                sx = xx * stride + j - pad
                                if 0 <= sx < w:
                                    out[row, base + xx] = x[b, ch, sy, sx]
        return out

    @numba.njit(cache=True)
    def col2im_numba(cols, n, c, h, w, k, stride, pad, ho, wo):
        p = ho * wo
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for b in range(n):
                        for y in range(ho):
                            sy = y * stride + i - pad
                            if sy < 0 or sy >= h:
                                continue
                            base = b * p + y * wo
                            for xx in range(wo):
                                sx = xx * stride + j - pad
                                if 0 <= sx < w:
                                    out[b, ch, sy, sx] += cols[row, base + xx]
        return out

    @numba.njit(cache=True)
    def avgpool2_numba(x):
        n, c, h, w = x.shape
        out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(h // 2):
                    for xx in range(w // 2):
                        s = (
                            x[b, ch, 2 * y, 2 * xx]
                            + x[b, ch, 2 * y, 2 * xx + 1]
                            + x[b, ch, 2 * y + 1, 2 * xx]
                            + x[b, ch, 2 * y + 1, 2 * xx + 1]
                        )
                        out[b, ch, y, xx] = s * 0.25
        return out

    @numba.njit(cache=True)
    def upsample2_numba(x):
        n, c, h, w = x.shape
        out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(2 * h):
                    for xx in range(2 * w):
                        out[b, ch, y, xx] = x[b, ch, y // 2, xx // 2]
        return out

    @numba.njit(cache=True)
    def upsample2_backward_numba(g):
        n, c, h2, w2 = g.shape
        out = np.zeros((n, c, h2 // 2, w2 // 2), dtype=g.dtype)
        for b in range(n):
            for ch in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        out[b, ch, y // 2, xx // 2] += g[b, ch, y, xx]
        return out


BACKEND = _requested_backend()

if BACKEND == "numba":
    im2col = im2col_numba
    col2im = col2im_numba
    avgpool2 = avgpool2_numba
    upsample2 = upsample2_numba
    upsample2_backward = upsample2_backward_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    avgpool2 = avgpool2_numpy
    upsample2 = upsample2_numpy
    upsample2_backward = upsample2_backward_numpy
