"""Style-based mapping network, skip-topology generator and residual discriminator.

Parameter tensors of every equalized layer are stored as N(0, 1) draws and
scaled at runtime by ``weight_gain = gain / sqrt(fan_in)``.

Each generator resolution block owns two style sites (``conv0``, ``conv1``);
the block's toRGB layer reads the same style as ``conv1``. Sites at resolution
<= ``style_split_resolution`` are coarse and receive the content style, the
rest receive the appearance style.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

LRELU_SLOPE = 0.2
DEFAULT_CHANNELS = {4: 256, 8: 256, 16: 128, 32: 128, 64: 64, 128: 64, 256: 32}


def _is_pow2(x: int) -> bool:
    return isinstance(x, int) and x > 0 and (x & (x - 1)) == 0


@dataclass
class SynthesisConfig:
    image_size: int = 32
    d_z: int = 512
    d_style: int = 512
    # resolution -> feature channels, shared by generator and discriminator
    channels: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    # None picks 8 for images <= 32 px and 16 above
    style_split_resolution: Optional[int] = None
    noise_enabled: bool = True
    mapping_depth: int = 8
    mbstd_group: int = 4

    def __post_init__(self):
        self.channels = {int(k): int(v) for k, v in self.channels.items()}
        if self.style_split_resolution is None:
            self.style_split_resolution = 8 if self.image_size <= 32 else 16
        self.validate()

    @property
    def resolutions(self) -> List[int]:
        return [2 ** i for i in range(2, int(math.log2(self.image_size)) + 1)]

    @property
    def num_sites(self) -> int:
        return 2 * len(self.resolutions)

    def validate(self) -> None:
        if not _is_pow2(self.image_size) or self.image_size < 16:
            raise ConfigError(f"image_size must be a power of two >= 16, got {self.image_size}")
        for name in ("d_z", "d_style", "mapping_depth", "mbstd_group"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        split = self.style_split_resolution
        if not _is_pow2(split) or split < 4 or split >= self.image_size:
            raise ConfigError(f"style_split_resolution must be a power of two in [4, image_size), got {split}")
        missing = [r for r in self.resolutions if r not in self.channels]
        if missing:
            raise ConfigError(f"channel schedule missing resolutions {missing}")
        widths = [self.channels[r] for r in self.resolutions]
        if any(c < 1 for c in widths):
            raise ConfigError("channel counts must be positive")
        if any(b > a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"channel schedule must be nonincreasing with resolution, got {widths}")

    def site_resolutions(self) -> List[int]:
        return [r for r in self.resolutions for _ in range(2)]

    def coarse_mask(self) -> List[bool]:
        return [r <= self.style_split_resolution for r in self.site_resolutions()]


# ---------------------------------------------------------------------------
# equalized learning-rate layers


class EqualizedLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 bias_init: float = 0.0, gain: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        self.weight_gain = gain / math.sqrt(in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.weight_gain, self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = gain / math.sqrt(in_channels * kernel_size * kernel_size)
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)


def equalized_layers(module: nn.Module):
    """Yield (name, layer) for every layer carrying a runtime weight gain."""
    for name, m in module.named_modules():
        if hasattr(m, "weight_gain"):
            yield name, m


# ---------------------------------------------------------------------------
# mapping


def normalize_2nd_moment(x, eps: float = 1e-8):
    return x * torch.rsqrt(x.square().mean(dim=1, keepdim=True) + eps)


class MappingNetwork(nn.Module):
    def __init__(self, d_z: int, d_style: int, depth: int):
        super().__init__()
        self.d_z = d_z
        self.d_style = d_style
        dims = [d_z] + [d_style] * depth
        self.layers = nn.ModuleList(EqualizedLinear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.d_z:
            raise InvalidInputError(f"latent must have shape (batch, {self.d_z}), got {tuple(z.shape)}")
        x = normalize_2nd_moment(z)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), LRELU_SLOPE)
        return x


def truncate(w, w_avg, psi: float):
    """Pull styles toward the running mean: w_avg + psi * (w - w_avg)."""
    if not 0.0 <= psi <= 1.0:
        raise InvalidInputError(f"psi must lie in [0, 1], got {psi}")
    w_avg = w_avg.to(w.dtype).expand_as(w)
    # lerp hits both endpoints exactly
    return torch.lerp(w_avg, w, float(psi))


class RunningStyleMean(nn.Module):
    """Exponential running mean of mapped styles (the truncation centre)."""

    def __init__(self, d_style: int, decay: float = 0.995):
        super().__init__()
        self.decay = decay
        self.register_buffer("w_avg", torch.zeros(d_style))
        self.register_buffer("count", torch.zeros((), dtype=torch.int64))

    @torch.no_grad()
    def update(self, w):
        batch_mean = w.detach().mean(dim=0).to(self.w_avg.dtype)
        if int(self.count) == 0:
            self.w_avg.copy_(batch_mean)
        else:
            self.w_avg.copy_(torch.lerp(batch_mean, self.w_avg, self.decay))
        self.count += 1


# ---------------------------------------------------------------------------
# modulated convolution


def mod_demod_weights(weight, scales, eps: float = 1e-8, demodulate: bool = True):
    """Per-sample effective kernels.

    weight: (out, in, k, k); scales: (in,) or (batch, in).
    Returns (out, in, k, k) or (batch, out, in, k, k).
    """
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    squeeze = scales.ndim == 1
    if squeeze:
        scales = scales[None]
    w = weight[None] * scales[:, None, :, None, None]
    if demodulate:
        w = w * torch.rsqrt(w.square().sum(dim=(2, 3, 4), keepdim=True) + eps)
    return w[0] if squeeze else w


def modulated_conv2d(x, weight, styles, demodulate: bool = True, eps: float = 1e-8):
    """Modulated convolution via input scaling; equal to convolving each sample
    with ``mod_demod_weights(weight, styles[b])``."""
    padding = weight.shape[-1] // 2
    x = x * styles[:, :, None, None]
    x = F.conv2d(x, weight, padding=padding)
    if demodulate:
        dcoefs = torch.rsqrt(styles.square() @ weight.square().sum(dim=(2, 3)).t() + eps)
        x = x * dcoefs[:, :, None, None]
    return x


class StyledConv(nn.Module):
    """Modulated 3x3 conv + per-pixel noise + bias + leaky ReLU (one style site)."""

    def __init__(self, in_channels: int, out_channels: int, d_style: int, resolution: int,
                 use_noise: bool = True):
        super().__init__()
        self.affine = EqualizedLinear(d_style, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, 3, 3))
        self.weight_gain = 1.0 / math.sqrt(in_channels * 9)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.use_noise = use_noise
        self.resolution = resolution
        if use_noise:
            self.noise_strength = nn.Parameter(torch.zeros(()))
            self.register_buffer("noise_const", torch.randn(resolution, resolution))

    def forward(self, x, w, noise_mode: str = "const", generator: Optional[torch.Generator] = None):
        styles = self.affine(w)
        x = modulated_conv2d(x, self.weight * self.weight_gain, styles)
        if self.use_noise and noise_mode != "none":
            if noise_mode == "const":
                noise = self.noise_const.to(x.dtype)[None, None]
            else:
                noise = torch.randn(x.shape[0], 1, self.resolution, self.resolution,
                                    generator=generator, dtype=x.dtype)
            x = x + noise * self.noise_strength
        return F.leaky_relu(x + self.bias[None, :, None, None], LRELU_SLOPE)


class ToRGB(nn.Module):
    def __init__(self, in_channels: int, d_style: int):
        super().__init__()
        self.affine = EqualizedLinear(d_style, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(3, in_channels, 1, 1))
        self.weight_gain = 1.0 / math.sqrt(in_channels)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        styles = self.affine(w)
        x = modulated_conv2d(x, self.weight * self.weight_gain, styles, demodulate=False)
        return x + self.bias[None, :, None, None]


def upsample2x(x):
    # bilinear with half-pixel centres keeps constant maps constant
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class SynthesisBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, d_style: int, resolution: int,
                 use_noise: bool):
        super().__init__()
        self.resolution = resolution
        if resolution == 4:
            self.const = nn.Parameter(torch.randn(out_channels, 4, 4))
        self.conv0 = StyledConv(in_channels, out_channels, d_style, resolution, use_noise)
        self.conv1 = StyledConv(out_channels, out_channels, d_style, resolution, use_noise)
        self.torgb = ToRGB(out_channels, d_style)

    def forward(self, x, img, w0, w1, noise_mode="const", generator=None):
        if self.resolution == 4:
            x = self.const[None].expand(w0.shape[0], -1, -1, -1)
        else:
            x = upsample2x(x)
        x = self.conv0(x, w0, noise_mode, generator)
        x = self.conv1(x, w1, noise_mode, generator)
        y = self.torgb(x, w1)
        img = y if img is None else upsample2x(img) + y
        return x, img


class Generator(nn.Module):
    """Synthesis network; blocks are registered as ``block{res}``."""

    def __init__(self, cfg: SynthesisConfig):
        super().__init__()
        self.cfg = cfg
        self.block_names = []
        prev = cfg.channels[4]
        for res in cfg.resolutions:
            out = cfg.channels[res]
            name = f"block{res}"
            setattr(self, name, SynthesisBlock(prev, out, cfg.d_style, res, cfg.noise_enabled))
            self.block_names.append(name)
            prev = out

    @property
    def num_sites(self) -> int:
        return self.cfg.num_sites

    def forward(self, ws, noise_mode: str = "const", noise_seed: Optional[int] = None,
                generator: Optional[torch.Generator] = None):
        """ws: (batch, num_sites, d_style). ``noise_mode`` is const | random | none;
        random noise is drawn from ``generator`` or from a fresh one seeded by ``noise_seed``."""
        if ws.ndim != 3 or ws.shape[1] != self.num_sites or ws.shape[2] != self.cfg.d_style:
            raise InvalidInputError(
                f"expected styles of shape (batch, {self.num_sites}, {self.cfg.d_style}), got {tuple(ws.shape)}")
        if noise_mode not in ("const", "random", "none"):
            raise InvalidInputError(f"unknown noise_mode {noise_mode!r}")
        if noise_mode == "random" and generator is None:
            generator = torch.Generator().manual_seed(0 if noise_seed is None else int(noise_seed))
        x = img = None
        for i, name in enumerate(self.block_names):
            block = getattr(self, name)
            x, img = block(x, img, ws[:, 2 * i], ws[:, 2 * i + 1], noise_mode, generator)
        return img

    def broadcast(self, w):
        """Same style at every site."""
        return w[:, None].expand(-1, self.num_sites, -1)

    def mix(self, w_coarse, w_fine):
        """Coarse sites get ``w_coarse``, fine sites ``w_fine``."""
        mask = torch.tensor(self.cfg.coarse_mask(), device=w_coarse.device)[None, :, None]
        return torch.where(mask, w_coarse[:, None], w_fine[:, None])


# ---------------------------------------------------------------------------
# discriminator


def minibatch_stddev(x, group_size: int = 4, num_channels: int = 1):
    """Append the mean per-group feature standard deviation as extra channel(s)."""
    n, c, h, w = x.shape
    g = group_size if (group_size <= n and n % group_size == 0) else n
    f = num_channels
    y = x.reshape(g, -1, f, c // f, h, w)
    y = y - y.mean(dim=0)
    var = y.square().mean(dim=0)
    # sqrt with a finite zero-gradient at var == 0 so identical samples give exactly 0
    pos = var > 0
    std = torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))), torch.zeros_like(var))
    std = std.mean(dim=(2, 3, 4))
    std = std.reshape(-1, f, 1, 1).repeat(g, 1, h, w)
    return torch.cat([x, std], dim=1)


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv0 = EqualizedConv2d(in_channels, in_channels, 3)
        self.conv1 = EqualizedConv2d(in_channels, out_channels, 3)
        self.skip = EqualizedConv2d(in_channels, out_channels, 1, bias=False)

    def forward(self, x):
        y = F.avg_pool2d(self.skip(x), 2)
        x = F.leaky_relu(self.conv0(x), LRELU_SLOPE)
        x = F.avg_pool2d(F.leaky_relu(self.conv1(x), LRELU_SLOPE), 2)
        return (x + y) * (1 / math.sqrt(2))


class Discriminator(nn.Module):
    def __init__(self, cfg: SynthesisConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        top = cfg.image_size
        self.fromrgb = EqualizedConv2d(3, ch[top], 1)
        self.block_names = []
        res = top
        while res > 4:
            name = f"block{res}"
            setattr(self, name, DiscriminatorBlock(ch[res], ch[res // 2]))
            self.block_names.append(name)
            res //= 2
        c4 = ch[4]
        self.conv = EqualizedConv2d(c4 + 1, c4, 3)
        self.fc = EqualizedLinear(c4 * 16, c4)
        self.out = EqualizedLinear(c4, 1)

    def forward(self, img):
        s = self.cfg.image_size
        if img.ndim != 4 or tuple(img.shape[1:]) != (3, s, s):
            raise InvalidInputError(f"expected images of shape (batch, 3, {s}, {s}), got {tuple(img.shape)}")
        x = F.leaky_relu(self.fromrgb(img), LRELU_SLOPE)
        for name in self.block_names:
            x = getattr(self, name)(x)
        x = minibatch_stddev(x, self.cfg.mbstd_group)
        x = F.leaky_relu(self.conv(x), LRELU_SLOPE)
        x = F.leaky_relu(self.fc(x.flatten(1)), LRELU_SLOPE)
        return self.out(x).squeeze(1)
