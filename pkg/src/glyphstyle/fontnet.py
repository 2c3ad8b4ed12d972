"""Generator (reference encoder, content encoder, SAM, decoder) and the
projection discriminator.

Block layout follows the published architecture tables; ``width`` scales
every channel count so the same topology can run at desk scale.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .nnblocks import (
    Conv2d,
    ConvBlock,
    ConvBlockSpec,
    Embedding,
    Module,
    ResidualBlock,
    ResidualBlockSpec,
    SeedLike,
    Sequential,
    _rng,
)
from .numcore import ops
from .numcore.tensor import DimensionError, Tensor
from .sam import SamConfig, SamParams, mean_style, sam_forward


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    width: float = 1.0
    heads: int = 8
    k: int = 3
    n_styles: int = 1
    n_chars: int = 1
    use_sam: bool = True

    def ch(self, base: int) -> int:
        return max(1, int(round(base * self.width)))

    @property
    def feature_channels(self) -> int:
        return self.ch(256)

    @property
    def feature_size(self) -> int:
        return self.image_size // 8

    @property
    def disc_features(self) -> int:
        return self.ch(512)

    def sam_config(self) -> SamConfig:
        fs = self.feature_size
        return SamConfig(channels=self.feature_channels, heads=self.heads, k=self.k, height=fs, width=fs)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_image(x: Tensor, size: Optional[int] = None) -> None:
    h, w = x.shape[-2:]
    if h != w:
        raise DimensionError(f"glyph images must be square, got {h}x{w}")
    if h % 8:
        raise DimensionError(f"image size {h} is not divisible by 8")
    if size is not None and h != size:
        raise DimensionError(f"model expects {size}x{size} images, got {h}x{w}")


class ReferenceEncoder(Module):
    def __init__(self, cfg: ModelConfig, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        c = cfg.ch
        self.layers = Sequential(
            ConvBlock(ConvBlockSpec(1, c(32)), rng),
            ConvBlock(ConvBlockSpec(c(32), c(64), downsample="avgpool"), rng),
            ConvBlock(ConvBlockSpec(c(64), c(128), downsample="avgpool"), rng),
            ResidualBlock(ResidualBlockSpec(c(128), c(128)), rng),
            ResidualBlock(ResidualBlockSpec(c(128), c(128)), rng),
            ResidualBlock(ResidualBlockSpec(c(128), c(256), downsample="avgpool"), rng),
            ResidualBlock(ResidualBlockSpec(c(256), c(256)), rng),
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.layers(x))


class ContentEncoder(Module):
    def __init__(self, cfg: ModelConfig, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        c = cfg.ch
        self.layers = Sequential(
            ConvBlock(ConvBlockSpec(1, c(32)), rng),
            ConvBlock(ConvBlockSpec(c(32), c(64), stride=2), rng),
            ConvBlock(ConvBlockSpec(c(64), c(128), stride=2), rng),
            ConvBlock(ConvBlockSpec(c(128), c(256), stride=2), rng),
            ConvBlock(ConvBlockSpec(c(256), c(256)), rng),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.layers(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        c = cfg.ch
        self.in_channels = 2 * c(256)
        self.layers = Sequential(
            ResidualBlock(ResidualBlockSpec(2 * c(256), c(256)), rng),
            ResidualBlock(ResidualBlockSpec(c(256), c(256)), rng),
            ResidualBlock(ResidualBlockSpec(c(256), c(256)), rng),
            ConvBlock(ConvBlockSpec(c(256), c(128), upsample="nearest"), rng),
            ConvBlock(ConvBlockSpec(c(128), c(64), upsample="nearest"), rng),
            ConvBlock(ConvBlockSpec(c(64), c(32), upsample="nearest"), rng),
        )
        self.to_image = Conv2d(c(32), 1, kernel=3, stride=1, pad=1, bias=True, seed=rng)

    def forward(self, f_cr: Tensor) -> Tensor:
        if f_cr.shape[-3] != self.in_channels:
            raise DimensionError(f"decoder expects {self.in_channels} channels, got {f_cr.shape[-3]}")
        return ops.sigmoid(self.to_image(self.layers(f_cr)))


class Generator(Module):
    """One parameter set used by both the k-shot branch and self-reconstruction."""

    def __init__(self, cfg: ModelConfig, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        self.cfg = cfg
        self.sam_cfg = cfg.sam_config()
        self.ref_encoder = ReferenceEncoder(cfg, rng)
        self.content_encoder = ContentEncoder(cfg, rng)
        self.sam = SamParams(self.sam_cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def encode_content(self, x_c: Tensor) -> Tensor:
        _check_image(x_c, self.cfg.image_size)
        return self.content_encoder(x_c)

    def encode_references(self, refs: Tensor) -> Tensor:
        """``(N, k, 1, H, W) -> (N, k, c, h, w)``."""
        if refs.ndim != 5:
            raise DimensionError(f"references must be (N, k, 1, H, W), got {refs.shape}")
        _check_image(refs, self.cfg.image_size)
        n, k = refs.shape[:2]
        flat = ops.reshape(refs, (n * k,) + refs.shape[2:])
        maps = self.ref_encoder(flat)
        return ops.reshape(maps, (n, k) + maps.shape[1:])

    def forward(self, x_c: Tensor, refs: Tensor, return_attention: bool = False):
        """``x_c`` ``(N, 1, H, W)``, ``refs`` ``(N, k, 1, H, W)`` -> ``(N, 1, H, W)``."""
        f_c = self.encode_content(x_c)
        f_r = self.encode_references(refs)
        f_cr, att = self._style(f_c, f_r)
        out = self.decoder(f_cr)
        return (out, att) if return_attention else out

    def _style(self, f_c: Tensor, f_r: Tensor):
        if self.cfg.use_sam:
            return sam_forward(self.sam_cfg, self.sam, f_c, f_r, return_attention=True)
        return mean_style(f_c, f_r), None

    def forward_branches(self, x_c: Tensor, refs: Tensor, sr_refs: Tensor):
        """Main k-shot branch and self-reconstruction branch in one pass.

        The content encoding is shared and both reference stacks go through
        the reference encoder and the decoder as one batch; the result equals
        two separate ``forward`` calls. Returns ``(main, sr, attention_main)``.
        """
        f_c = self.encode_content(x_c)
        n, k, k_sr = refs.shape[0], refs.shape[1], sr_refs.shape[1]
        _check_image(refs, self.cfg.image_size)
        _check_image(sr_refs, self.cfg.image_size)
        flat = ops.concat(
            [ops.reshape(refs, (n * k,) + refs.shape[2:]), ops.reshape(sr_refs, (n * k_sr,) + sr_refs.shape[2:])],
            axis=0,
        )
        maps = self.ref_encoder(flat)
        f_main, f_sr = ops.split(maps, [n * k, n * k_sr], axis=0)
        f_main = ops.reshape(f_main, (n, k) + maps.shape[1:])
        f_sr = ops.reshape(f_sr, (n, k_sr) + maps.shape[1:])
        cr_main, att = self._style(f_c, f_main)
        cr_sr, _ = self._style(f_c, f_sr)
        out = self.decoder(ops.concat([cr_main, cr_sr], axis=0))
        main, sr = ops.split(out, [n, n], axis=0)
        return main, sr, att


class Discriminator(Module):
    """Backbone pooled to a feature vector, scored against style and character embeddings."""

    def __init__(self, cfg: ModelConfig, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        c = cfg.ch
        self.cfg = cfg
        self.layers = Sequential(
            ConvBlock(ConvBlockSpec(1, c(32), stride=2, activation="none", spectral=True), rng),
            ResidualBlock(ResidualBlockSpec(c(32), c(64), downsample="avgpool", spectral=True), rng),
            ResidualBlock(ResidualBlockSpec(c(64), c(128), downsample="avgpool", spectral=True), rng),
            ResidualBlock(ResidualBlockSpec(c(128), c(256), downsample="avgpool", spectral=True), rng),
            ResidualBlock(ResidualBlockSpec(c(256), c(256), spectral=True), rng),
            ResidualBlock(ResidualBlockSpec(c(256), c(512), spectral=True), rng),
        )
        self.style_embed = Embedding(cfg.n_styles, cfg.disc_features, rng)
        self.char_embed = Embedding(cfg.n_chars, cfg.disc_features, rng)

    def features(self, x: Tensor) -> Tensor:
        return ops.global_avg_pool(self.layers(x))

    def forward(self, x: Tensor, style_ids, char_ids) -> Tensor:
        """Per-sample logits ``(N,)``."""
        style_ids = np.atleast_1d(np.asarray(style_ids))
        char_ids = np.atleast_1d(np.asarray(char_ids))
        phi = self.features(x)
        if phi.shape[0] != style_ids.size or phi.shape[0] != char_ids.size:
            raise DimensionError("one style id and one character id are needed per image")
        proj = ops.add(self.style_embed(style_ids), self.char_embed(char_ids))
        return ops.sum(ops.mul(phi, proj), axis=1)


# ---------------------------------------------------------------------------
# single-sample functional API


def encode_content(params: Generator, x_c: Tensor) -> Tensor:
    """``(1, H, W) -> (c, H/8, W/8)``."""
    out = params.encode_content(ops.reshape(x_c, (1,) + x_c.shape))
    return ops.reshape(out, out.shape[1:])


def encode_references(params: Generator, refs: Sequence[Tensor]) -> list[Tensor]:
    """k images ``(1, H, W)`` -> k maps ``(c, H/8, W/8)``."""
    refs = list(refs)
    if not refs:
        raise DimensionError("at least one reference image is required")
    stacked = ops.reshape(ops.stack(refs, axis=0), (1, len(refs)) + refs[0].shape)
    maps = params.encode_references(stacked)
    return [ops.getitem(maps, (0, i)) for i in range(maps.shape[1])]


def decode(params: Generator, f_cr: Tensor) -> Tensor:
    """``(2c, h, w) -> (1, 8h, 8w)``."""
    return params.decoder(f_cr)


def generate(params: Generator, x_c: Tensor, refs: Sequence[Tensor]) -> Tensor:
    """Stylize one ``(1, H, W)`` content glyph from k ``(1, H, W)`` references."""
    refs = list(refs)
    if not refs:
        raise DimensionError("at least one reference image is required")
    xb = ops.reshape(x_c, (1,) + x_c.shape)
    rb = ops.reshape(ops.stack(refs, axis=0), (1, len(refs)) + refs[0].shape)
    out = params(xb, rb)
    return ops.reshape(out, out.shape[1:])


def discriminate(params: Discriminator, image: Tensor, style_id: int, char_id: int) -> Tensor:
    """Scalar logit for one ``(1, H, W)`` image."""
    if not 0 <= style_id < params.cfg.n_styles:
        raise IndexError(f"style id {style_id} out of range")
    if not 0 <= char_id < params.cfg.n_chars:
        raise IndexError(f"character id {char_id} out of range")
    logit = params(ops.reshape(image, (1,) + image.shape), [style_id], [char_id])
    return ops.reshape(logit, ())
