"""Coarse-to-fine field estimation from a pair of feature pyramids."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import NUM_LEVELS, Backbone, forward_dual, level_shapes
from .warping import compose, upsample_field, warp_trilinear

MODES = ("pyramid", "single_field")


@dataclass
class RegistrationOutput:
    """All fields produced for one forward pass.

    ``level_fields[i]`` is the residual estimated at level ``i + 1`` and
    ``accumulated[i]`` the composition of all residuals up to it, both in
    voxel units of that level's grid. Levels a variant does not estimate
    hold ``None``.
    """

    level_fields: list
    accumulated: list
    final_field: torch.Tensor
    warped: torch.Tensor


def field_head(in_channels: int) -> nn.Conv3d:
    """3x3x3 convolution to a 3-channel displacement, no activation, zero-initialised."""
    head = nn.Conv3d(in_channels, 3, 3, padding=1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    return head


def estimate_level_field(warped_moving_feat, fixed_feat, head: nn.Conv3d) -> torch.Tensor:
    if warped_moving_feat.shape != fixed_feat.shape:
        raise ValueError(
            f"feature shape mismatch: {tuple(warped_moving_feat.shape)} vs {tuple(fixed_feat.shape)}"
        )
    stacked = torch.cat([warped_moving_feat, fixed_feat], dim=1)
    if stacked.shape[1] != head.in_channels:
        raise ValueError(f"head expects {head.in_channels} channels, got {stacked.shape[1]}")
    return head(stacked)


def _check_pyramids(pm, pf):
    if len(pm) != NUM_LEVELS or len(pf) != NUM_LEVELS:
        raise ValueError(f"expected {NUM_LEVELS} pyramid levels, got {len(pm)} and {len(pf)}")


def run_pyramid(pm, pf, heads, moving: torch.Tensor) -> RegistrationOutput:
    """Warp-stack-convolve at every level, composing residuals as the resolution grows.

    The moving features at level ``i`` are warped by the upsampled running
    composition of levels ``1..i-1``; level 1 has nothing to warp with.
    """
    _check_pyramids(pm, pf)
    if len(heads) != NUM_LEVELS:
        raise ValueError(f"expected {NUM_LEVELS} field heads, got {len(heads)}")
    level_fields, accumulated = [], []
    acc = None
    for feat_m, feat_f, head in zip(pm, pf, heads):
        if acc is None:
            residual = estimate_level_field(feat_m, feat_f, head)
            acc = residual
        else:
            acc_up = upsample_field(acc, feat_m.shape[2:])
            residual = estimate_level_field(warp_trilinear(feat_m, acc_up), feat_f, head)
            acc = compose(acc_up, residual)
        level_fields.append(residual)
        accumulated.append(acc)
    final = upsample_field(acc, moving.shape[2:])
    return RegistrationOutput(level_fields, accumulated, final, warp_trilinear(moving, final))


def single_field_variant(pm, pf, head, moving: torch.Tensor) -> RegistrationOutput:
    """Ablation: one field from the finest level only, no coarse-to-fine refinement."""
    _check_pyramids(pm, pf)
    field = estimate_level_field(pm[-1], pf[-1], head)
    final = upsample_field(field, moving.shape[2:])
    absent = [None] * (NUM_LEVELS - 1)
    return RegistrationOutput(absent + [field], absent + [field], final, warp_trilinear(moving, final))


def to_full_resolution(field: torch.Tensor, level: int, input_shape) -> torch.Tensor:
    """Carry a level-``level`` field (1-based) up the level schedule to the input grid."""
    shapes = level_shapes(input_shape)[level:] + [tuple(input_shape)]
    for shape in shapes:
        field = upsample_field(field, shape)
    return field


class RegistrationNet(nn.Module):
    """Backbone plus field heads; ``mode`` picks the pyramid or the single-field ablation."""

    def __init__(self, encoder_channels=(16, 32, 32, 32), decoder_channels=16, mode="pyramid"):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.backbone = Backbone(encoder_channels, decoder_channels)
        n_heads = NUM_LEVELS if mode == "pyramid" else 1
        self.heads = nn.ModuleList(field_head(2 * decoder_channels) for _ in range(n_heads))

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> RegistrationOutput:
        pm, pf = forward_dual(self.backbone, moving, fixed)
        if self.mode == "pyramid":
            return run_pyramid(pm, pf, self.heads, moving)
        return single_field_variant(pm, pf, self.heads[0], moving)
