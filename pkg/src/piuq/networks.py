"""U-net generator with image/scale heads and a strided convolutional critic.

Layer recipe
------------
Generator: six resolution levels (five 2x downsamplings by max-pooling), each
level two ``3x3`` conv + LeakyReLU(0.2) + pixelwise feature normalisation;
channel widths ``base * (1, 2, 4, 8, 16, 16)``.  Decoder levels upsample
bilinearly, apply a ``3x3`` conv, concatenate the skip and apply two more
``3x3`` convs.  Convolutions use variance-preserving (Kaiming, LeakyReLU gain)
initialisation with zero biases.  After the last upsampling the raw input is
concatenated to the trunk features, which then split into an image branch
(``tanh``) and a scale branch (softplus, floored at ``sigma_min``).

Pixel normalisation uses no spatial or batch statistics, so full-size and
patch forward passes are treated alike; it pins the trunk's activation scale,
which sign-like Adam steps (``beta1 = 0``) otherwise inflate until the
``tanh`` saturates.

Critic: five ``4x4`` stride-2 convs with widths ``base * (1, 2, 4, 8, 16)``,
LeakyReLU(0.2), then a ``3x3`` conv to one channel averaged over space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

SIGMA_MIN = 1e-3
DEPTH = 5


class GeneratorOutput(NamedTuple):
    image: torch.Tensor
    scale: torch.Tensor


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 22
    depth: int = DEPTH
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        if self.base_width < 1:
            raise ValueError(f"base_width must be positive, got {self.base_width}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.depth != DEPTH:
            raise ValueError(f"only depth {DEPTH} is supported")

    @property
    def widths(self) -> list[int]:
        mult = [1, 2, 4, 8, 16, 16]
        return [self.base_width * m for m in mult]


@dataclass(frozen=True)
class CriticSpec:
    in_channels: int = 1
    base_width: int = 42
    depth: int = DEPTH

    def __post_init__(self):
        if self.base_width < 1:
            raise ValueError(f"base_width must be positive, got {self.base_width}")
        if self.in_channels < 1:
            raise ValueError("channel count must be positive")
        if self.depth != DEPTH:
            raise ValueError(f"only depth {DEPTH} is supported")


def spec_hash(*specs) -> str:
    payload = json.dumps([[type(s).__name__, asdict(s)] for s in specs], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=(k - 1) // 2 if stride == 1 else 1)


class PixelNorm(nn.Module):
    """Rescales each pixel's feature vector to unit RMS over channels."""

    def __init__(self, eps: float = 1e-8):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + self.eps)


def _act():
    return nn.Sequential(nn.LeakyReLU(0.2), PixelNorm())


class _DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(_conv(cin, cout), _act(), _conv(cout, cout), _act())


class _Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.reduce = nn.Sequential(_conv(cin, cskip), _act())
        self.fuse = _DoubleConv(2 * cskip, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.fuse(torch.cat([self.reduce(x), skip], dim=1))


class Generator(nn.Module):
    """Maps ``(n, c_in, d, d)`` in model range to a :class:`GeneratorOutput`."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.down = nn.ModuleList([_DoubleConv(spec.in_channels, w[0])])
        self.down.extend(_DoubleConv(w[i], w[i + 1]) for i in range(spec.depth))
        self.up = nn.ModuleList(
            _Up(w[i + 1], w[i], w[i]) for i in reversed(range(spec.depth))
        )
        head_in = w[0] + spec.in_channels
        self.image_head = nn.Sequential(
            _conv(head_in, w[0]), nn.LeakyReLU(0.2), nn.Conv2d(w[0], spec.out_channels, 1)
        )
        self.scale_head = nn.Sequential(
            _conv(head_in, w[0]), nn.LeakyReLU(0.2), nn.Conv2d(w[0], spec.out_channels, 1)
        )
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.2)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> GeneratorOutput:
        d = x.shape[-1]
        if x.shape[-2] != d or d % (2 ** self.spec.depth):
            raise ValueError(f"input must be square with side divisible by {2 ** self.spec.depth}")
        skips = []
        h = x
        for i, block in enumerate(self.down):
            if i:
                h = F.max_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        skips.pop()
        for block in self.up:
            h = block(h, skips.pop())
        h = torch.cat([h, x], dim=1)
        image = torch.tanh(self.image_head(h))
        scale = torch.clamp(F.softplus(self.scale_head(h)), min=self.spec.sigma_min)
        return GeneratorOutput(image, scale)


class Critic(nn.Module):
    """Wasserstein critic: ``(n, c, d, d) -> (n,)`` unbounded scores."""

    def __init__(self, spec: CriticSpec = CriticSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        for i in range(spec.depth):
            cout = spec.base_width * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(_conv(cin, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y).mean(dim=(1, 2, 3))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
