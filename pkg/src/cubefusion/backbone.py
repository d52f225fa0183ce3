"""Per-stream feature extraction: channel adapter, residual encoder, FPN neck.

Each input stream (camera image, range-azimuth map, azimuth-elevation map)
runs through its own encoder and neck; streams only meet later at the
query max-pool, so a stream can be zeroed without touching the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

MIN_INPUT_SIZE = 8
STAGE_STRIDES = (4, 8, 16)


@dataclass
class EncoderConfig:
    """Width/depth of one residual encoder.

    `widths[i]` and `depths[i]` give the channel count and residual-block
    count of stage i; stages run at strides 4, 8, 16 relative to the input.
    """

    in_channels: int = 3
    widths: tuple[int, int, int] = (16, 32, 64)
    depths: tuple[int, int, int] = (2, 2, 2)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.depths = tuple(self.depths)
        if len(self.widths) != 3 or len(self.depths) != 3:
            raise ValueError("widths and depths must each have 3 entries")
        if min(self.widths) < 2:
            raise ValueError("stage widths must be >= 2 (group normalization)")
        if min(self.depths) < 1:
            raise ValueError("stage depths must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")


def _group_norm(channels: int) -> nn.GroupNorm:
    # >= 2 channels per group, so 1x1 stage maps (legal at the 8x8 minimum
    # input size) still normalize in training mode
    return nn.GroupNorm(min(math.gcd(channels, 8), channels // 2), channels)


class ChannelAdapter(nn.Module):
    """1x1 convolution mapping 6-channel radar maps to 3 encoder channels."""

    def __init__(self, in_channels: int = 6, out_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, "
                             f"got {x.shape[-3]}")
        return self.conv(x)


class _ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.norm2 = _group_norm(c_out)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                _group_norm(c_out))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))
        return F.relu(out + self.shortcut(x))


class ResidualEncoder(nn.Module):
    """Stride-2 stem plus three residual stages at strides 4, 8, 16.

    Group normalization keeps the forward pass deterministic and
    batch-size independent, which the reproducibility contracts rely on.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, w[0], 3, stride=2, padding=1, bias=False),
            _group_norm(w[0]), nn.ReLU(inplace=True))
        chans = (w[0],) + w[:2]
        self.stages = nn.ModuleList()
        for i in range(3):
            blocks = [_ResidualBlock(chans[i], w[i], stride=2)]
            blocks += [_ResidualBlock(w[i], w[i]) for _ in range(config.depths[i] - 1)]
            self.stages.append(nn.Sequential(*blocks))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
            raise ValueError(f"input {h}x{w} too small; need at least "
                             f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
        out = self.stem(x)
        stages = []
        for stage in self.stages:
            out = stage(out)
            stages.append(out)
        return stages


@dataclass
class FeaturePyramid:
    """Uniform-width multi-scale maps for one stream, finest level first.

    Spatial dims halve (ceil for odd sizes) between consecutive levels;
    level 0 sits at stride 2, level 3 at stride 16.
    """

    levels: list[torch.Tensor]
    source_id: str

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(lvl.shape[-2:]) for lvl in self.levels]


class FPNNeck(nn.Module):
    """Top-down feature pyramid over three encoder stages plus a raw skip.

    The raw encoder input is average-pooled once (stride 2, ceil mode) to
    serve as the finest level, giving four levels at strides 2/4/8/16 whose
    sizes halve level to level. Laterals are 1x1 projections to
    `out_channels`; coarser levels are nearest-upsampled and added before a
    3x3 smoothing convolution.
    """

    def __init__(self, raw_channels: int, stage_channels: tuple[int, int, int],
                 out_channels: int = 16):
        super().__init__()
        self.out_channels = out_channels
        in_chans = (raw_channels,) + tuple(stage_channels)
        self.laterals = nn.ModuleList(
            nn.Conv2d(c, out_channels, 1) for c in in_chans)
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_chans)

    def forward(self, raw_skip: torch.Tensor, stages: list[torch.Tensor],
                source_id: str = "") -> FeaturePyramid:
        if len(stages) != 3:
            raise ValueError("expected 3 encoder stages")
        pooled = F.avg_pool2d(raw_skip, 2, ceil_mode=True)
        inputs = [pooled] + list(stages)
        laterals = [lat(x) for lat, x in zip(self.laterals, inputs)]
        for i in range(len(laterals) - 2, -1, -1):
            up = F.interpolate(laterals[i + 1], size=laterals[i].shape[-2:],
                               mode="nearest")
            laterals[i] = laterals[i] + up
        levels = [smooth(lat) for smooth, lat in zip(self.smooth, laterals)]
        return FeaturePyramid(levels=levels, source_id=source_id)


class StreamBackbone(nn.Module):
    """Adapter (radar streams only) + encoder + neck for one input stream."""

    def __init__(self, source_id: str, encoder_config: EncoderConfig,
                 out_channels: int = 16, adapter_in_channels: int | None = None):
        super().__init__()
        self.source_id = source_id
        self.adapter = (ChannelAdapter(adapter_in_channels,
                                       encoder_config.in_channels)
                        if adapter_in_channels is not None else None)
        self.encoder = ResidualEncoder(encoder_config)
        self.neck = FPNNeck(encoder_config.in_channels, encoder_config.widths,
                            out_channels)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if self.adapter is not None:
            x = self.adapter(x)
        return self.neck(x, self.encoder(x), source_id=self.source_id)
