"""Frequency encoding module: encoder modules (EMs) plus the content fusion module (CFM).

Each EM is a component manipulation block (two conv-BN-lReLU stages, the second
with stride 2, plus a strided 1x1 residual) followed by a projecting block
(global average pool + FC) that emits a distilled vector ``s = [s_a | s_b]``
of size ``2 * d_style``. The CFM starts from a learnable constant ``p0`` and
runs a chain of FC layers, each followed by the feature transform
``q = s_a * p + s_b`` with that stage's distilled vector.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidInputError

LRELU_SLOPE = 0.2


@dataclass
class EncoderConfig:
    depths: List[int] = field(default_factory=lambda: [128, 256, 512, 512])
    d_style: int = 512
    in_size: int = 128
    # fraction of the running statistics kept per batch (torch momentum = 1 - this)
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.depths = [int(d) for d in self.depths]
        self.validate()

    @property
    def num_blocks(self) -> int:
        return len(self.depths)

    def validate(self) -> None:
        if not self.depths or any(d < 1 for d in self.depths):
            raise ConfigError(f"encoder depths must be a nonempty list of positive ints, got {self.depths}")
        if self.d_style < 1:
            raise ConfigError("d_style must be positive")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        if self.in_size < 1 or self.in_size % (2 ** self.num_blocks):
            raise ConfigError(
                f"input size {self.in_size} must be divisible by 2**{self.num_blocks} for {self.num_blocks} encoder modules")


def depth_schedule(n: int, base: Optional[List[int]] = None, cap: int = 512) -> List[int]:
    """Truncate ``base`` to n entries, or extend it by doubling (capped)."""
    if n < 1:
        raise InvalidInputError(f"number of encoder modules must be >= 1, got {n}")
    base = list(base or [128, 256, 512, 512])
    out = base[:n]
    while len(out) < n:
        out.append(min(cap, out[-1] * 2))
    return out


def ft_transform(p, s):
    """Feature transform: s_a * p + s_b where s = [s_a | s_b]."""
    d = p.shape[-1]
    if s.shape[-1] != 2 * d:
        raise InvalidInputError(f"distilled vector of size {s.shape[-1]} does not match 2 * {d}")
    return s[..., :d] * p + s[..., d:]


class ComponentManipulationBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, bn_momentum: float = 0.9):
        super().__init__()
        m = 1.0 - bn_momentum
        # no conv bias: the following batch-norm cancels it
        self.conv0 = nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False)
        self.bn0 = nn.BatchNorm2d(out_channels, momentum=m)
        self.conv1 = nn.Conv2d(out_channels, out_channels, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels, momentum=m)
        self.residual = nn.Conv2d(in_channels, out_channels, 1, stride=2)

    def forward(self, x):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise InvalidInputError(f"feature map spatial size must be even, got {tuple(x.shape[-2:])}")
        y = F.leaky_relu(self.bn0(self.conv0(x)), LRELU_SLOPE)
        y = F.leaky_relu(self.bn1(self.conv1(y)), LRELU_SLOPE)
        return y + self.residual(x)


class ProjectingBlock(nn.Module):
    def __init__(self, channels: int, d_style: int):
        super().__init__()
        self.fc = nn.Linear(channels, 2 * d_style)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))


class EncoderModule(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, d_style: int, bn_momentum: float = 0.9):
        super().__init__()
        self.cmb = ComponentManipulationBlock(in_channels, out_channels, bn_momentum)
        self.pb = ProjectingBlock(out_channels, d_style)

    def forward(self, x):
        x = self.cmb(x)
        return x, self.pb(x)


class ContentFusion(nn.Module):
    def __init__(self, d_style: int, num_blocks: int):
        super().__init__()
        self.num_blocks = num_blocks
        self.p0 = nn.Parameter(torch.randn(d_style))
        for i in range(1, num_blocks + 1):
            setattr(self, f"fc{i}", nn.Linear(d_style, d_style))

    def forward(self, distilled: List[torch.Tensor]):
        if len(distilled) != self.num_blocks:
            raise InvalidInputError(f"expected {self.num_blocks} distilled vectors, got {len(distilled)}")
        q = self.p0[None].expand(distilled[0].shape[0], -1)
        for i, s in enumerate(distilled, start=1):
            q = ft_transform(getattr(self, f"fc{i}")(q), s)
        return q


class FrequencyEncoder(nn.Module):
    """x_f (batch, 1, S, S) -> content-guiding vector (batch, d_style).

    Registered as ``stem``, ``em1``..``emN`` and ``cfm``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d1 = cfg.depths[0]
        self.stem = nn.Conv2d(1, d1, 3, padding=1)
        prev = d1
        for i, depth in enumerate(cfg.depths, start=1):
            setattr(self, f"em{i}", EncoderModule(prev, depth, cfg.d_style, cfg.bn_momentum))
            prev = depth
        self.cfm = ContentFusion(cfg.d_style, cfg.num_blocks)

    def distill(self, x_f):
        s = self.cfg.in_size
        if x_f.ndim != 4 or tuple(x_f.shape[1:]) != (1, s, s):
            raise InvalidInputError(f"expected refined images of shape (batch, 1, {s}, {s}), got {tuple(x_f.shape)}")
        # refined intensities live around [0, 1]
        x = F.leaky_relu(self.stem((x_f - 0.5) * 2.0), LRELU_SLOPE)
        distilled = []
        for i in range(1, self.cfg.num_blocks + 1):
            x, s_i = getattr(self, f"em{i}")(x)
            distilled.append(s_i)
        return distilled

    def forward(self, x_f, return_distilled: bool = False):
        distilled = self.distill(x_f)
        q = self.cfm(distilled)
        return (q, distilled) if return_distilled else q

