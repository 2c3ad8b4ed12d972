"""Convolution and residual blocks, instance norm, Kaiming init, spectral norm."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Optional, Union

import numpy as np

from .numcore import ops
from .numcore.tensor import DimensionError, Tensor, default_dtype, no_grad

SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def fan(shape: tuple[int, ...], mode: str = "fan_in") -> int:
    if len(shape) < 2:
        raise ValueError(f"fan is undefined for shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    if mode == "fan_in":
        return shape[1] * receptive
    if mode == "fan_out":
        return shape[0] * receptive
    raise ValueError(f"unknown fan mode {mode!r}")


def kaiming_init(shape, fan_mode: str = "fan_in", seed: SeedLike = None, dtype=None) -> Tensor:
    """Zero-mean normal draws with variance ``2 / fan``."""
    shape = tuple(int(s) for s in shape)
    std = np.sqrt(2.0 / fan(shape, fan_mode))
    data = _rng(seed).normal(0.0, std, size=shape).astype(dtype or default_dtype())
    return Tensor(data, requires_grad=True)


def instance_norm(x: Tensor, eps: float = 1e-5, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None) -> Tensor:
    """Instance normalization with an optional per-channel affine."""
    y = ops.instance_norm(x, eps)
    if weight is not None:
        shape = (-1, 1, 1)
        y = ops.mul(y, ops.reshape(weight, shape))
        if bias is not None:
            y = ops.add(y, ops.reshape(bias, shape))
    return y


class Module:
    """Parameter container. Tensors with ``requires_grad`` become parameters,
    Module attributes become children, both in assignment order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value) -> None:
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = None
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        mod = self
        for p in path:
            mod = mod._children[p]
        if leaf not in mod._buffers:
            raise KeyError(dotted)
        object.__setattr__(mod, leaf, value)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, buf in list(self.named_buffers()):
            self.set_buffer(name, buf.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.n_layers = len(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self.n_layers))

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(i % self.n_layers))

    def __len__(self) -> int:
        return self.n_layers

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


def _l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / (np.linalg.norm(v) + eps)


class Conv2d(Module):
    """Square-kernel convolution, optionally spectrally normalized.

    With ``spectral=True`` the weight is divided by a power-iteration estimate
    of its largest singular value; one iteration runs per training forward.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 3,
        stride: int = 1,
        pad: int = 1,
        bias: bool = True,
        spectral: bool = False,
        seed: SeedLike = None,
    ) -> None:
        super().__init__()
        rng = _rng(seed)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.pad = pad
        self.spectral = spectral
        self.weight = kaiming_init((out_channels, in_channels, kernel, kernel), seed=rng)
        if bias:
            self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True)
        else:
            self.bias = None
        if spectral:
            u = _l2_normalize(rng.normal(size=out_channels)).astype(default_dtype())
            self.register_buffer("sn_u", u)
            self.register_buffer("sn_v", _l2_normalize(self.weight.data.reshape(out_channels, -1).T @ u))

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        wmat = self.weight.data.reshape(self.out_channels, -1)
        if self.training:
            v = _l2_normalize(wmat.T @ self.sn_u)
            u = _l2_normalize(wmat @ v)
            object.__setattr__(self, "sn_u", u.astype(wmat.dtype))
            object.__setattr__(self, "sn_v", v.astype(wmat.dtype))
        u = Tensor(self.sn_u.reshape(1, -1))
        v = Tensor(self.sn_v.reshape(-1, 1))
        w2 = ops.reshape(self.weight, (self.out_channels, -1))
        sigma = ops.reshape(ops.matmul(u, ops.matmul(w2, v)), ())
        return ops.div(self.weight, sigma)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.effective_weight(), self.bias, stride=self.stride, pad=self.pad)


class InstanceNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, affine: bool = True) -> None:
        super().__init__()
        self.eps = eps
        if affine:
            self.weight = Tensor(np.ones(channels, dtype=default_dtype()), requires_grad=True)
            self.bias = Tensor(np.zeros(channels, dtype=default_dtype()), requires_grad=True)
        else:
            self.weight = self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.eps, self.weight, self.bias)


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    norm: str = "in"
    activation: str = "relu"
    downsample: str = "none"
    upsample: str = "none"
    spectral: bool = False

    def __post_init__(self) -> None:
        if self.norm not in ("in", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.downsample not in ("none", "avgpool"):
            raise ValueError(f"unknown downsample {self.downsample!r}")
        if self.upsample not in ("none", "nearest"):
            raise ValueError(f"unknown upsample {self.upsample!r}")
        if self.downsample != "none" and self.upsample != "none":
            raise ValueError("a block cannot both downsample and upsample")


@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    downsample: str = "none"
    spectral: bool = False

    def body_specs(self) -> tuple[ConvBlockSpec, ConvBlockSpec]:
        # the inner blocks never resample; the residual block owns that step
        first = ConvBlockSpec(self.in_channels, self.out_channels, spectral=self.spectral)
        return first, replace(first, in_channels=self.out_channels)


class ConvBlock(Module):
    """conv -> norm -> activation -> optional resample."""

    def __init__(self, spec: ConvBlockSpec, seed: SeedLike = None) -> None:
        super().__init__()
        self.spec = spec
        self.conv = Conv2d(
            spec.in_channels,
            spec.out_channels,
            spec.kernel,
            spec.stride,
            spec.pad,
            bias=spec.norm == "none",
            spectral=spec.spectral,
            seed=seed,
        )
        if spec.norm == "in":
            self.norm = InstanceNorm2d(spec.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        c_axis = x.ndim - 3
        if x.shape[c_axis] != self.spec.in_channels:
            raise DimensionError(f"block expects {self.spec.in_channels} channels, got {x.shape[c_axis]}")
        y = self.conv(x)
        if self.spec.norm == "in":
            y = self.norm(y)
        if self.spec.activation == "relu":
            y = ops.relu(y)
        if self.spec.downsample == "avgpool":
            y = ops.avgpool2x2(y)
        elif self.spec.upsample == "nearest":
            y = ops.upsample_nearest2x(y)
        return y


class ResidualBlock(Module):
    """pool(shortcut(x) + body(x)); the shortcut is a 1x1 projection when widths differ."""

    def __init__(self, spec: ResidualBlockSpec, seed: SeedLike = None) -> None:
        super().__init__()
        rng = _rng(seed)
        self.spec = spec
        first, second = spec.body_specs()
        self.block1 = ConvBlock(first, rng)
        self.block2 = ConvBlock(second, rng)
        if spec.in_channels != spec.out_channels:
            self.shortcut = Conv2d(
                spec.in_channels, spec.out_channels, kernel=1, pad=0, bias=False, spectral=spec.spectral, seed=rng
            )
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.shortcut is None else self.shortcut(x)
        y = ops.add(skip, self.block2(self.block1(x)))
        if self.spec.downsample == "avgpool":
            y = ops.avgpool2x2(y)
        return y


def conv_block_forward(spec: ConvBlockSpec, x: Tensor, seed: SeedLike = 0) -> Tensor:
    """Build a freshly initialized block from ``spec`` and apply it."""
    return ConvBlock(spec, seed)(x)


def residual_block_forward(spec: ResidualBlockSpec, x: Tensor, seed: SeedLike = 0) -> Tensor:
    return ResidualBlock(spec, seed)(x)


class Embedding(Module):
    def __init__(self, num: int, dim: int, seed: SeedLike = None) -> None:
        super().__init__()
        self.weight = kaiming_init((num, dim), seed=seed)

    def forward(self, ids) -> Tensor:
        return ops.take_rows(self.weight, ids)


def zero_parameters(module: Module) -> None:
    with no_grad():
        for p in module.parameters():
            p.data = np.zeros_like(p.data)
