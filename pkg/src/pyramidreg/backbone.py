"""Shared-weight encoder-decoder producing a 4-level feature pyramid per input volume."""

from __future__ import annotations

import math

import torch
from torch import nn

from .warping import upsample

MIN_EXTENT = 16
NUM_LEVELS = 4


def level_shapes(input_shape) -> list[tuple[int, int, int]]:
    """Spatial shapes of the decoding levels, coarsest (1/16) first."""
    return [
        tuple(math.ceil(s / 2 ** (NUM_LEVELS + 1 - i)) for s in input_shape)
        for i in range(1, NUM_LEVELS + 1)
    ]


def conv_bn_relu(in_ch, out_ch, stride=1):
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.BatchNorm3d(out_ch),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.bn1 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + x)


class EncoderStage(nn.Sequential):
    """Stride-2 convolution, optionally followed by residual blocks."""

    def __init__(self, in_ch, out_ch, num_res_blocks):
        layers = [conv_bn_relu(in_ch, out_ch, stride=2)]
        layers += [ResBlock(out_ch) for _ in range(num_res_blocks)]
        super().__init__(*layers)


class RefineUnit(nn.Module):
    """Fuse a coarse map into a finer skip map: ``upsample(coarse) + conv1x1(skip)``."""

    def __init__(self, skip_ch, out_ch):
        super().__init__()
        self.proj = nn.Conv3d(skip_ch, out_ch, 1)

    def forward(self, coarse, skip):
        fine = skip.shape[2:]
        for c, f in zip(coarse.shape[2:], fine):
            if f not in (2 * c - 1, 2 * c):
                raise ValueError(
                    f"skip shape {tuple(fine)} is not one level finer than {tuple(coarse.shape[2:])}"
                )
        return upsample(coarse, fine) + self.proj(skip)


class Backbone(nn.Module):
    """One encoder-decoder; applying it to both volumes gives the two weight-sharing streams.

    Encoder stages run at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
    The first stage is a single strided convolution, the other three add two
    residual blocks each. The decoder starts from a 1x1x1 projection of the
    deepest stage and climbs back to 1/2 resolution through refine units.
    """

    def __init__(self, encoder_channels=(16, 32, 32, 32), decoder_channels=16, in_channels=1):
        super().__init__()
        if len(encoder_channels) != NUM_LEVELS:
            raise ValueError(f"need {NUM_LEVELS} encoder widths, got {encoder_channels}")
        self.encoder_channels = tuple(int(c) for c in encoder_channels)
        self.decoder_channels = int(decoder_channels)
        stages, prev = [], in_channels
        for k, ch in enumerate(self.encoder_channels):
            stages.append(EncoderStage(prev, ch, 0 if k == 0 else 2))
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.Conv3d(self.encoder_channels[-1], self.decoder_channels, 1)
        # refine[0] fuses into encoder stage 3 (1/8), refine[2] into stage 1 (1/2)
        self.refine = nn.ModuleList(
            RefineUnit(ch, self.decoder_channels) for ch in self.encoder_channels[-2::-1]
        )

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        if min(x.shape[2:]) < MIN_EXTENT:
            raise ValueError(
                f"input spatial shape {tuple(x.shape[2:])} too small: every axis needs >= {MIN_EXTENT}"
            )
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def decode(self, enc: list[torch.Tensor]) -> list[torch.Tensor]:
        level = self.lateral(enc[-1])
        pyramid = [level]
        for unit, skip in zip(self.refine, enc[-2::-1]):
            level = unit(level, skip)
            pyramid.append(level)
        return pyramid

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.decode(self.encode(x))


def forward_dual(backbone: Backbone, moving: torch.Tensor, fixed: torch.Tensor):
    """Run the shared backbone on each volume separately; returns (moving, fixed) pyramids."""
    if moving.shape != fixed.shape:
        raise ValueError(f"shape mismatch: moving {tuple(moving.shape)} vs fixed {tuple(fixed.shape)}")
    return backbone(moving), backbone(fixed)
