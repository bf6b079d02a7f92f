"""Toy convolutional backbone and feature pyramid network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from omdet.autodiff import Conv2d, GroupNorm, Module, Tensor
from omdet.autodiff import functional as F
from omdet.errors import ConfigError

LEVELS = (2, 3, 4, 5)


@dataclass
class FeaturePyramid:
    """Levels P2..P5, each (B, d_fpn, H / 2^l, W / 2^l)."""

    levels: dict[int, Tensor]

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    def as_mapping(self) -> dict[int, Tensor]:
        return self.levels


def _groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ConvBlock(Module):
    """conv(stride 2) -> norm -> gelu -> conv -> norm -> gelu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1)
        self.norm1 = GroupNorm(_groups(c_out), c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.norm2 = GroupNorm(_groups(c_out), c_out)

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(self.norm2(self.conv2(x)))


class Backbone(Module):
    """Stride-2 stem followed by four stride-2 stages emitting C2..C5."""

    def __init__(self, rng: np.random.Generator, channels=(32, 64, 128, 256), stem_channels: int = 16):
        if len(channels) != 4:
            raise ConfigError(f"backbone needs exactly 4 stage widths, got {channels}")
        self.channels = tuple(int(c) for c in channels)
        self.stem = Conv2d(3, stem_channels, 3, rng, stride=2, padding=1)
        self.stem_norm = GroupNorm(_groups(stem_channels), stem_channels)
        widths = (stem_channels,) + self.channels
        self.stages = [ConvBlock(widths[i], widths[i + 1], rng) for i in range(4)]

    def forward(self, image: Tensor) -> dict[int, Tensor]:
        if image.ndim == 3:
            image = F.reshape(image, (1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != 3:
            raise ConfigError(f"backbone expects (B, 3, H, W) images, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ConfigError(f"image height and width must be divisible by 32, got {h}x{w}")
        x = F.gelu(self.stem_norm(self.stem(image)))
        feats = {}
        for level, stage in zip(LEVELS, self.stages):
            x = stage(x)
            feats[level] = x
        return feats


class FPN(Module):
    """1x1 laterals, nearest x2 top-down pathway with addition, 3x3 smoothing."""

    def __init__(self, in_channels, d_fpn: int, rng: np.random.Generator):
        self.in_channels = tuple(in_channels)
        self.lateral = [Conv2d(c, d_fpn, 1, rng) for c in self.in_channels]
        self.smooth = [Conv2d(d_fpn, d_fpn, 3, rng, padding=1) for _ in self.in_channels]

    def forward(self, feats: dict[int, Tensor]) -> FeaturePyramid:
        for level, c in zip(LEVELS, self.in_channels):
            if level not in feats or feats[level].shape[1] != c:
                got = feats[level].shape if level in feats else None
                raise ConfigError(f"FPN expected C{level} with {c} channels, got {got}")
        out = {}
        top = None
        for i in reversed(range(len(LEVELS))):
            level = LEVELS[i]
            lat = self.lateral[i](feats[level])
            top = lat if top is None else F.add(lat, F.upsample_nearest(top, 2))
            out[level] = self.smooth[i](top)
        return FeaturePyramid({lvl: out[lvl] for lvl in LEVELS})
