"""Multi-head cross-attention that pulls local style from reference maps.

Content positions are queries, the positions of all k reference maps
(concatenated spatially) are keys and values. Every head scores content
against reference positions, softmax-normalizes over the reference
positions, and averages the value vectors; heads are concatenated and
projected back to ``c`` channels, then stacked under the content features.

Shapes below use c channels, M heads of width cm, an h x w feature grid and
k references. Single-sample helpers take unbatched maps; :func:`sam_forward`
also accepts a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .nnblocks import Module, SeedLike, _rng, kaiming_init
from .numcore import ops
from .numcore.tensor import DimensionError, Tensor


@dataclass(frozen=True)
class SamConfig:
    channels: int = 256
    heads: int = 8
    head_dim: Optional[int] = None
    k: int = 3
    height: int = 16
    width: int = 16

    def __post_init__(self) -> None:
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.head_dim is None:
            if self.channels % self.heads:
                raise ValueError(f"{self.channels} channels do not split into {self.heads} heads")
            object.__setattr__(self, "head_dim", self.channels // self.heads)
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")

    @property
    def inner(self) -> int:
        """Width of the concatenated head outputs."""
        return self.heads * self.head_dim


class SamParams(Module):
    """Bias-free projections. Row block ``m`` of query/key/value is head ``m``."""

    def __init__(self, config: SamConfig, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        self.config = config
        c, inner = config.channels, config.inner
        self.query = kaiming_init((inner, c), seed=rng)
        self.key = kaiming_init((inner, c), seed=rng)
        self.value = kaiming_init((inner, c), seed=rng)
        self.out = kaiming_init((c, inner), seed=rng)

    def head_rows(self, weight: Tensor, m: int) -> Tensor:
        cm = self.config.head_dim
        if not 0 <= m < self.config.heads:
            raise IndexError(f"head {m} out of range [0, {self.config.heads})")
        return ops.take_rows(weight, np.arange(m * cm, (m + 1) * cm))


# ---------------------------------------------------------------------------
# single-sample pieces


def flatten_content(f_c: Tensor) -> Tensor:
    """``(c, h, w) -> (c, h*w)``, row-major over space."""
    if f_c.ndim != 3:
        raise DimensionError(f"content map must be (c, h, w), got {f_c.shape}")
    c, h, w = f_c.shape
    return ops.reshape(f_c, (c, h * w))


def unflatten_content(seq: Tensor, h: int, w: int) -> Tensor:
    c, n = seq.shape
    if n != h * w:
        raise DimensionError(f"sequence length {n} != {h}*{w}")
    return ops.reshape(seq, (c, h, w))


def flatten_references(maps: Union[Sequence[Tensor], Tensor]) -> Tensor:
    """k maps ``(c, h, w)`` -> ``(c, k*h*w)``, blocks in list order."""
    if isinstance(maps, Tensor):
        if maps.ndim != 4:
            raise DimensionError(f"stacked references must be (k, c, h, w), got {maps.shape}")
        k, c, h, w = maps.shape
        return ops.reshape(ops.permute(maps, (1, 0, 2, 3)), (c, k * h * w))
    maps = list(maps)
    if not maps:
        raise DimensionError("at least one reference map is required")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise DimensionError(f"reference maps disagree in shape: {shape} vs {m.shape}")
    return ops.concat([flatten_content(m) for m in maps], axis=1)


def project_qkv(params: SamParams, fc_seq: Tensor, fr_seq: Tensor, m: int) -> tuple[Tensor, Tensor, Tensor]:
    """Head ``m`` projections: Q ``(cm, hw)``, K and V ``(cm, khw)``."""
    q = ops.matmul(params.head_rows(params.query, m), fc_seq)
    k = ops.matmul(params.head_rows(params.key, m), fr_seq)
    v = ops.matmul(params.head_rows(params.value, m), fr_seq)
    return q, k, v


def correspondence(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot products ``Q^T K / sqrt(cm)`` of shape ``(hw, khw)``."""
    if q.shape[-2] != k.shape[-2]:
        raise DimensionError(f"query/key head widths differ: {q.shape} vs {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-2])
    return ops.mul(ops.matmul(ops.transpose(q), k), scale)


def aggregate(a: Tensor, v: Tensor) -> Tensor:
    """``softmax(A) V^T``: every output row is a convex mix of value columns."""
    if a.shape[-1] != v.shape[-1]:
        raise DimensionError(f"attention width {a.shape[-1]} != value length {v.shape[-1]}")
    return ops.matmul(ops.softmax(a, axis=-1), ops.transpose(v))


def fuse(params: SamParams, heads: Sequence[Tensor], f_c: Tensor) -> Tensor:
    """Concatenate head outputs, project to c channels, stack under ``f_c``.

    ``heads`` are the per-head ``(hw, cm)`` aggregates. Returns ``(2c, h, w)``.
    """
    cfg = params.config
    if len(heads) != cfg.heads:
        raise DimensionError(f"expected {cfg.heads} head outputs, got {len(heads)}")
    c, h, w = f_c.shape
    cat = ops.concat([ops.transpose(s) for s in heads], axis=0)  # (M*cm, hw)
    style = ops.reshape(ops.matmul(params.out, cat), (c, h, w))
    return ops.concat([f_c, style], axis=0)


# ---------------------------------------------------------------------------
# full module


def _check_inputs(config: SamConfig, f_c: Tensor, refs: Tensor) -> None:
    c = config.channels
    if f_c.shape[-3] != c or refs.shape[-3] != c:
        raise DimensionError(f"SAM expects {c} channels, got content {f_c.shape} and references {refs.shape}")
    if f_c.shape[-2:] != refs.shape[-2:]:
        raise DimensionError(f"content grid {f_c.shape[-2:]} != reference grid {refs.shape[-2:]}")


def sam_forward(
    config: SamConfig,
    params: SamParams,
    f_c: Tensor,
    refs: Union[Tensor, Sequence[Tensor]],
    return_attention: bool = False,
):
    """Aggregate reference style onto content positions; all heads at once.

    ``f_c`` is ``(c, h, w)`` or ``(N, c, h, w)``; ``refs`` is a list of k
    maps, a ``(k, c, h, w)`` tensor, or a batched ``(N, k, c, h, w)`` tensor.
    Returns ``f_cr`` with 2c channels and, when asked, the pre-softmax
    correspondence of shape ``(N, M, hw, khw)`` (or without N).
    """
    if not isinstance(refs, Tensor):
        refs = ops.stack(list(refs), axis=0)
    squeezed = f_c.ndim == 3
    if squeezed:
        f_c = ops.reshape(f_c, (1,) + f_c.shape)
        refs = ops.reshape(refs, (1,) + refs.shape)
    if refs.ndim != 5:
        raise DimensionError(f"references must be (N, k, c, h, w), got {refs.shape}")
    _check_inputs(config, f_c, refs)
    n, c, h, w = f_c.shape
    k = refs.shape[1]
    big_m, cm = config.heads, config.head_dim
    hw = h * w

    fc_seq = ops.reshape(f_c, (n, c, hw))
    fr_seq = ops.reshape(ops.permute(refs, (0, 2, 1, 3, 4)), (n, c, k * hw))
    q = ops.reshape(ops.matmul(params.query, fc_seq), (n, big_m, cm, hw))
    kk = ops.reshape(ops.matmul(params.key, fr_seq), (n, big_m, cm, k * hw))
    v = ops.reshape(ops.matmul(params.value, fr_seq), (n, big_m, cm, k * hw))
    att = correspondence(q, kk)  # (n, M, hw, khw)
    s = aggregate(att, v)  # (n, M, hw, cm)
    s = ops.reshape(ops.permute(s, (0, 1, 3, 2)), (n, big_m * cm, hw))
    style = ops.reshape(ops.matmul(params.out, s), (n, c, h, w))
    f_cr = ops.concat([f_c, style], axis=1)
    if squeezed:
        f_cr = ops.reshape(f_cr, f_cr.shape[1:])
        att = ops.reshape(att, att.shape[1:])
    return (f_cr, att) if return_attention else f_cr


def sam_forward_per_head(config: SamConfig, params: SamParams, f_c: Tensor, refs: Sequence[Tensor]) -> Tensor:
    """Reference composition of the single-sample pieces, one head at a time."""
    if f_c.shape[0] != config.channels:
        raise DimensionError(f"SAM expects {config.channels} channels, got {f_c.shape[0]}")
    fc_seq = flatten_content(f_c)
    fr_seq = flatten_references(refs)
    heads = []
    for m in range(config.heads):
        q, k, v = project_qkv(params, fc_seq, fr_seq, m)
        heads.append(aggregate(correspondence(q, k), v))
    return fuse(params, heads, f_c)


def mean_style(f_c: Tensor, refs: Tensor) -> Tensor:
    """Attention-free stand-in: mean reference feature broadcast over the grid."""
    if refs.ndim != 5:
        raise DimensionError(f"references must be (N, k, c, h, w), got {refs.shape}")
    avg = ops.mean(refs, axis=(1, 3, 4))  # (N, c)
    n, c = avg.shape
    style = ops.broadcast_to(ops.reshape(avg, (n, c, 1, 1)), f_c.shape)
    return ops.concat([f_c, style], axis=1)
