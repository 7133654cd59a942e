"""Segmenter and shape-prior auto-encoders.

Three networks live here:

* :class:`UNet`, the segmenter mapping an image to vessel probabilities;
* :class:`ConvAutoEncoder`, the undercomplete mask auto-encoder whose
  encoder supplies latent codes for the shape prior;
* :class:`SemiOvercompleteAutoEncoder`, whose encoder adds an overcomplete
  branch grafted onto the second-to-last undercomplete level, a
  communication block exchanging residual features between the two
  branches and a fusion block producing the latent code.

All tensors are ``(batch, channels, height, width)``. Encoder levels are
counted from 1; level ``l`` has spatial size ``input_size / 2**(l - 1)``.
Latent codes are flattened channel-major, then row-major over space, which
is the memory order of a contiguous NCHW tensor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import format_kv, parse_kv, to_bool, to_float, to_int, to_size
from .errors import ConfigError, ShapeError

# Kernel constants shared by the modules and the receptive-field tracer.
CONV_KERNEL = 3
POOL_KERNEL = 2
FUSION_POOL_KERNEL = 2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``latent_channels`` overrides the width of the deepest encoder level of
    the auto-encoders; by default every level doubles ``base_channels``.
    ``communication`` toggles the communication block of the
    semi-overcomplete encoder. ``head_bias``, when set, initializes the bias
    of the sigmoid output layer (a log-odds prior on foreground); otherwise
    the default initialization is kept.
    """

    depth: int = 4
    base_channels: int = 8
    overcomplete_factor: int = 2
    residual_units: int = 2
    input_channels: int = 1
    input_size: tuple[int, int] = (64, 64)
    latent_channels: int | None = None
    communication: bool = True
    head_bias: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    def validate(self) -> None:
        if self.depth < 3:
            raise ConfigError(f"depth must be >= 3, got {self.depth}")
        if self.residual_units < 1:
            raise ConfigError(f"residual_units must be >= 1, got {self.residual_units}")
        if self.overcomplete_factor < 2:
            raise ConfigError(
                f"overcomplete_factor must be >= 2, got {self.overcomplete_factor}"
            )
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.latent_channels is not None and self.latent_channels < 1:
            raise ConfigError(f"latent_channels must be >= 1, got {self.latent_channels}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError(f"input_size must be two positive ints, got {self.input_size}")
        divisor = 2 ** (self.depth - 1)
        for side in self.input_size:
            if side % divisor:
                raise ConfigError(
                    f"input_size {self.input_size} is not divisible by "
                    f"2**(depth-1) = {divisor}"
                )

    def widths(self, *, autoencoder: bool = False) -> list[int]:
        widths = [self.base_channels * 2**i for i in range(self.depth)]
        if autoencoder and self.latent_channels is not None:
            widths[-1] = self.latent_channels
        return widths

    def level_size(self, level: int) -> tuple[int, int]:
        scale = 2 ** (level - 1)
        return self.input_size[0] // scale, self.input_size[1] // scale

    def latent_shape(self) -> tuple[int, int, int]:
        return (self.widths(autoencoder=True)[-1], *self.level_size(self.depth))

    def to_dict(self) -> dict[str, object]:
        return asdict(self)

    def to_text(self) -> str:
        values = self.to_dict()
        values["input_size"] = "{}x{}".format(*self.input_size)
        for key in ("latent_channels", "head_bias"):
            if values[key] is None:
                del values[key]
        return format_kv(values)

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "ModelConfig":
        unknown = set(values) - cls.keys()
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs: dict[str, object] = {}
        for key, value in values.items():
            if key == "input_size":
                kwargs[key] = to_size(key, value)
            elif key == "communication":
                kwargs[key] = to_bool(key, value)
            elif key in {"latent_channels", "head_bias"} and value.lower() in {"", "none"}:
                kwargs[key] = None
            elif key == "head_bias":
                kwargs[key] = to_float(key, value)
            else:
                kwargs[key] = to_int(key, value)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text))


@dataclass
class LatentCode:
    """Flattened latent codes for a batch, shape ``(batch, C*H*W)``."""

    values: torch.Tensor
    source_shape: tuple[int, int, int]

    @classmethod
    def from_map(cls, fmap: torch.Tensor) -> "LatentCode":
        return cls(fmap.reshape(fmap.shape[0], -1), tuple(fmap.shape[1:]))

    def to_map(self) -> torch.Tensor:
        return self.values.reshape(self.values.shape[0], *self.source_shape)

    def __len__(self) -> int:
        return self.values.shape[1]


def _expect(x: torch.Tensor, channels: int, size: tuple[int, int], what: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels or tuple(x.shape[2:]) != tuple(size):
        raise ShapeError(
            f"{what}: expected (N, {channels}, {size[0]}, {size[1]}), "
            f"got {tuple(x.shape)}"
        )


def conv_bn_relu(in_ch: int, out_ch: int, kernel_size: int = CONV_KERNEL) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(),
    )


def _head(in_ch: int, bias: float | None) -> nn.Conv2d:
    head = nn.Conv2d(in_ch, 1, 1)
    if bias is not None:
        nn.init.constant_(head.bias, bias)
    return head


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(*conv_bn_relu(in_ch, out_ch), *conv_bn_relu(out_ch, out_ch))


class ResidualUnit(nn.Module):
    """Full pre-activation residual function: (BN, ReLU, conv) twice.

    Returns only the residual branch; the identity is added by the chain.
    """

    def __init__(self, channels: int, kernel_size: int = CONV_KERNEL):
        super().__init__()
        self.channels = channels
        pad = kernel_size // 2
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.bn2 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size, padding=pad)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv1(F.relu(self.bn1(x)))
        return self.conv2(F.relu(self.bn2(x)))


class ResidualChain(nn.Module):
    """``J`` stacked residual units: ``R_j = R_{j-1} + F(R_{j-1}, w_{j-1})``."""

    def __init__(self, channels: int, units: int, kernel_size: int = CONV_KERNEL):
        super().__init__()
        if units < 1:
            raise ConfigError(f"residual chain needs at least one unit, got {units}")
        self.channels = channels
        self.units = nn.ModuleList(ResidualUnit(channels, kernel_size) for _ in range(units))

    def forward(self, r0: torch.Tensor) -> torch.Tensor:
        if r0.dim() != 4 or r0.shape[1] != self.channels:
            raise ShapeError(
                f"residual chain expects {self.channels} channels, got shape {tuple(r0.shape)}"
            )
        r = r0
        for unit in self.units:
            r = r + unit(r)
        return r


def resample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resampling with ``align_corners=False``."""
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class CommunicationBlock(nn.Module):
    """Exchange residual features between the undercomplete map ``f_eu`` and
    the overcomplete map ``f_eo`` (``n`` times larger spatially).

    Each direction has its own residual chain.
    """

    def __init__(self, channels: int, factor: int, units: int, kernel_size: int = CONV_KERNEL):
        super().__init__()
        self.factor = factor
        self.from_over = ResidualChain(channels, units, kernel_size)
        self.from_under = ResidualChain(channels, units, kernel_size)

    def forward(self, f_eu: torch.Tensor, f_eo: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if f_eu.shape[:2] != f_eo.shape[:2]:
            raise ShapeError(
                f"communication block needs matching batch/channels, got "
                f"{tuple(f_eu.shape)} and {tuple(f_eo.shape)}"
            )
        h, w = f_eu.shape[2:]
        if tuple(f_eo.shape[2:]) != (h * self.factor, w * self.factor):
            raise ShapeError(
                f"overcomplete map must be {self.factor}x the undercomplete map: "
                f"{tuple(f_eu.shape[2:])} vs {tuple(f_eo.shape[2:])}"
            )
        eu_hat = f_eu + resample(self.from_over(f_eo), (h, w))
        eo_hat = f_eo + resample(self.from_under(f_eu), tuple(f_eo.shape[2:]))
        return eu_hat, eo_hat


def pool_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Max-pool ``x`` down to ``size`` with a 2x2 window and stride equal to the
    (integer) reduction ratio."""
    ratios = []
    for big, small in zip(x.shape[2:], size):
        if small < 1 or big % small:
            raise ShapeError(f"cannot pool {tuple(x.shape[2:])} to {tuple(size)}: non-integer ratio")
        ratios.append(big // small)
    if ratios[0] != ratios[1]:
        raise ShapeError(f"anisotropic pooling ratio {ratios} is not supported")
    ratio = ratios[0]
    return F.max_pool2d(x, kernel_size=min(FUSION_POOL_KERNEL, ratio), stride=ratio)


class FusionBlock(nn.Module):
    def __init__(self, channels: int, units: int, kernel_size: int = CONV_KERNEL):
        super().__init__()
        self.channels = channels
        self.pre_bn = nn.BatchNorm2d(2 * channels)
        self.mix = nn.Conv2d(2 * channels, channels, 1)
        self.chain = ResidualChain(channels, units, kernel_size)
        self.post = conv_bn_relu(channels, channels)

    def forward(self, f_eu_bottom: torch.Tensor, f_eo_top: torch.Tensor) -> torch.Tensor:
        pooled = pool_to(f_eo_top, tuple(f_eu_bottom.shape[2:]))
        if pooled.shape[1] != f_eu_bottom.shape[1] or pooled.shape[1] != self.channels:
            raise ConfigError(
                f"fusion block: pooled overcomplete features have {pooled.shape[1]} "
                f"channels, bottleneck has {f_eu_bottom.shape[1]}, block expects {self.channels}"
            )
        z1 = torch.cat([f_eu_bottom, pooled], dim=1)
        z2 = self.mix(F.relu(self.pre_bn(z1)))
        z3 = self.chain(z2)
        return self.post(z3 + pooled)


class UndercompleteEncoder(nn.Module):
    """Contracting path; ``level(l, x)`` maps level ``l-1`` features to level ``l``."""

    def __init__(self, in_ch: int, widths: list[int]):
        super().__init__()
        chans = [in_ch, *widths]
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(chans[:-1], chans[1:]))

    def level(self, l: int, x: torch.Tensor) -> torch.Tensor:
        if l > 1:
            x = F.max_pool2d(x, POOL_KERNEL)
        return self.blocks[l - 1](x)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for l in range(1, len(self.blocks) + 1):
            x = self.level(l, x)
            feats.append(x)
        return feats


class MaskDecoder(nn.Module):
    """Expansive path without skips: transposed convolutions and conv blocks
    back to input resolution, sigmoid head."""

    def __init__(self, widths: list[int], head_bias: float | None = None):
        super().__init__()
        rev = widths[::-1]
        self.ups = nn.ModuleList(nn.ConvTranspose2d(a, b, 2, stride=2) for a, b in zip(rev[:-1], rev[1:]))
        self.blocks = nn.ModuleList(ConvBlock(b, b) for b in rev[1:])
        self.head = _head(widths[0], head_bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for up, block in zip(self.ups, self.blocks):
            z = block(up(z))
        return torch.sigmoid(self.head(z))


class UNet(nn.Module):
    """U-Net segmenter with a single-channel sigmoid output."""

    kind = "unet"

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths()
        self.encoder = UndercompleteEncoder(config.input_channels, widths)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2)
            for i in reversed(range(config.depth - 1))
        )
        self.blocks = nn.ModuleList(
            ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(config.depth - 1))
        )
        self.head = _head(widths[0], config.head_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _expect(x, self.config.input_channels, self.config.input_size, "unet input")
        feats = self.encoder(x)
        y = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            y = block(torch.cat([up(y), skip], dim=1))
        return torch.sigmoid(self.head(y))


def _check_undercomplete(config: ModelConfig) -> None:
    c, h, w = config.latent_shape()
    latent, mask = c * h * w, config.input_size[0] * config.input_size[1]
    if latent >= mask:
        raise ConfigError(
            f"latent code has {c}*{h}*{w} = {latent} elements, not fewer than the "
            f"{mask} mask elements; lower latent_channels or base_channels"
        )


class _MaskAutoEncoder(nn.Module):
    kind = ""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        _check_undercomplete(config)
        self.config = config
        self.widths = config.widths(autoencoder=True)
        self.decoder = MaskDecoder(self.widths, config.head_bias)

    def _check_mask(self, y: torch.Tensor) -> None:
        _expect(y, 1, self.config.input_size, f"{self.kind} input mask")

    def encode(self, y: torch.Tensor) -> LatentCode:
        raise NotImplementedError

    def decode(self, z: LatentCode | torch.Tensor) -> torch.Tensor:
        shape = self.config.latent_shape()
        if isinstance(z, LatentCode):
            z = z.values
        if z.dim() == 2:
            if z.shape[1] != math.prod(shape):
                raise ShapeError(
                    f"latent length {z.shape[1]} does not match {shape} = {math.prod(shape)}"
                )
            z = z.reshape(z.shape[0], *shape)
        elif z.dim() != 4 or tuple(z.shape[1:]) != shape:
            raise ShapeError(f"latent map must be (N, {shape}), got {tuple(z.shape)}")
        return self.decoder(z)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(y))


class ConvAutoEncoder(_MaskAutoEncoder):
    """Undercomplete convolutional auto-encoder over masks."""

    kind = "cae"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        self.encoder = UndercompleteEncoder(1, self.widths)

    def encode(self, y: torch.Tensor) -> LatentCode:
        self._check_mask(y)
        return LatentCode.from_map(self.encoder(y)[-1])


class OvercompleteLayer(nn.Module):
    """Bilinear upsampling by ``factor`` followed by conv, BN and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, factor: int):
        super().__init__()
        self.factor = factor
        self.conv = conv_bn_relu(in_ch, out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[2:]
        return self.conv(resample(x, (h * self.factor, w * self.factor)))


class SemiOvercompleteAutoEncoder(_MaskAutoEncoder):
    """Auto-encoder with a two-branch (under/overcomplete) encoder."""

    kind = "socae"

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        w = self.widths
        n, J = config.overcomplete_factor, config.residual_units
        self.encoder_u = UndercompleteEncoder(1, w)
        self.over1 = OvercompleteLayer(w[-2], w[-2], n)
        self.over2 = OvercompleteLayer(w[-2], w[-1], n)
        self.communication = CommunicationBlock(w[-2], n, J) if config.communication else None
        self.fusion = FusionBlock(w[-1], J)

    def encoder_features(self, y: torch.Tensor) -> dict[str, torch.Tensor]:
        """All named intermediate maps of the two-branch encoder."""
        self._check_mask(y)
        depth = self.config.depth
        x = y
        for l in range(1, depth):
            x = self.encoder_u.level(l, x)
        feats = {"eu_penultimate": x}
        eo1 = self.over1(x)
        feats["eo1"] = eo1
        if self.communication is not None:
            x, eo1 = self.communication(x, eo1)
        feats["eu_penultimate_hat"], feats["eo1_hat"] = x, eo1
        feats["eu_bottom"] = self.encoder_u.level(depth, x)
        feats["eo2"] = self.over2(eo1)
        feats["latent"] = self.fusion(feats["eu_bottom"], feats["eo2"])
        return feats

    def encode(self, y: torch.Tensor) -> LatentCode:
        return LatentCode.from_map(self.encoder_features(y)["latent"])


MODEL_KINDS = {cls.kind: cls for cls in (UNet, ConvAutoEncoder, SemiOvercompleteAutoEncoder)}


def build_model(kind: str, config: ModelConfig) -> nn.Module:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None
    return cls(config)


def build_unet(config: ModelConfig) -> UNet:
    return UNet(config)


def build_cae(config: ModelConfig) -> ConvAutoEncoder:
    return ConvAutoEncoder(config)


def build_socae(config: ModelConfig) -> SemiOvercompleteAutoEncoder:
    return SemiOvercompleteAutoEncoder(config)


def residual_chain(r0: torch.Tensor, chain: ResidualChain) -> torch.Tensor:
    return chain(r0)


def communication_block(
    f_eu: torch.Tensor, f_eo: torch.Tensor, block: CommunicationBlock
) -> tuple[torch.Tensor, torch.Tensor]:
    return block(f_eu, f_eo)


def fusion_block(f_eu_bottom: torch.Tensor, f_eo_top: torch.Tensor, block: FusionBlock) -> LatentCode:
    return LatentCode.from_map(block(f_eu_bottom, f_eo_top))


# Receptive fields ---------------------------------------------------------


@dataclass(frozen=True)
class _RF:
    """Receptive field size and neuron spacing, both in input pixels."""

    size: float
    jump: float

    def conv(self, k: int = CONV_KERNEL) -> "_RF":
        return _RF(self.size + (k - 1) * self.jump, self.jump)

    def pool(self, k: int, stride: int) -> "_RF":
        return _RF(self.size + (k - 1) * self.jump, self.jump * stride)

    def bilinear(self, factor: float) -> "_RF":
        # each output sample interpolates two neighbouring source samples per axis
        return _RF(self.size + self.jump, self.jump / factor)

    def chain(self, units: int) -> "_RF":
        rf = self
        for _ in range(2 * units):
            rf = rf.conv()
        return rf

    def merge(self, other: "_RF") -> "_RF":
        if not math.isclose(self.jump, other.jump):
            raise ShapeError(f"merging maps with spacings {self.jump} and {other.jump}")
        return _RF(max(self.size, other.size), self.jump)


def receptive_fields(config: ModelConfig) -> dict[str, float]:
    """Analytic receptive field (input pixels, one axis) of the main maps of
    the semi-overcomplete encoder, traced through its layer graph."""
    n, J = config.overcomplete_factor, config.residual_units
    rf = _RF(1.0, 1.0)
    levels = {}
    for l in range(1, config.depth):
        if l > 1:
            rf = rf.pool(POOL_KERNEL, POOL_KERNEL)
        rf = rf.conv().conv()
        levels[l] = rf
    eu = levels[config.depth - 1]
    eo1 = eu.bilinear(n).conv()
    if config.communication:
        eu_hat = eu.merge(eo1.chain(J).bilinear(1 / n))
        eo1_hat = eo1.merge(eu.chain(J).bilinear(n))
    else:
        eu_hat, eo1_hat = eu, eo1
    bottom = eu_hat.pool(POOL_KERNEL, POOL_KERNEL).conv().conv()
    eo2 = eo1_hat.bilinear(n).conv()
    return {
        "eu_penultimate": eu.size,
        "eo1": eo1.size,
        "eo1_hat": eo1_hat.size,
        "eu_bottom": bottom.size,
        "eo2": eo2.size,
    }
