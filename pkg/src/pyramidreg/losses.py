"""Registration objective (windowed correlation + field smoothness) and Dice overlap."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    window: int = 9
    lam: float = 1.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    def to_dict(self):
        return asdict(self)


def _window_mean(x, window):
    """Box mean over the trailing 3 axes; zero padding counts towards the ``window**3`` voxels."""
    half = window // 2
    for axis in (-3, -2, -1):
        pad = [0, 0] * 3
        pad[2 * (-1 - axis)] = half + 1
        pad[2 * (-1 - axis) + 1] = half
        c = F.pad(x, pad).cumsum(axis)
        n = c.shape[axis]
        x = c.narrow(axis, window, n - window) - c.narrow(axis, 0, n - window)
    return x / window**3


def local_cc(a: torch.Tensor, b: torch.Tensor, window: int = 9, eps: float = 1e-5) -> torch.Tensor:
    """Per-voxel squared windowed correlation of two (N, 1, D, H, W) volumes."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 5 or a.shape[1] != 1:
        raise ValueError(f"expected (N, 1, D, H, W) volumes, got {tuple(a.shape)}")
    if window > min(a.shape[2:]):
        raise ValueError(f"window {window} larger than volume {tuple(a.shape[2:])}")
    n = float(window**3)
    moments = _window_mean(torch.cat([a, b, a * a, b * b, a * b], dim=1), window)
    mu_a, mu_b, aa, bb, ab = moments.unbind(1)
    cross = n * (ab - mu_a * mu_b)
    var_a = n * (aa - mu_a * mu_a)
    var_b = n * (bb - mu_b * mu_b)
    return (cross * cross / (var_a * var_b + eps))[:, None]


def nlcc(warped: torch.Tensor, fixed: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return -local_cc(warped, fixed, cfg.window, cfg.eps).mean()


def smoothness(flow: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference over voxels, components and the 3 directions.

    The difference past the last voxel of an axis counts as zero.
    """
    d0 = flow[..., 1:, :, :] - flow[..., :-1, :, :]
    d1 = flow[..., :, 1:, :] - flow[..., :, :-1, :]
    d2 = flow[..., :, :, 1:] - flow[..., :, :, :-1]
    total = d0.pow(2).sum() + d1.pow(2).sum() + d2.pow(2).sum()
    return total / (3 * flow.numel())


def total_loss(out, fixed: torch.Tensor, cfg: LossConfig | None = None):
    """Return ``(loss, similarity, smooth)`` for a registration output."""
    cfg = cfg or LossConfig()
    sim = nlcc(out.warped, fixed, cfg)
    smooth = smoothness(out.final_field)
    return sim + cfg.lam * smooth, sim, smooth


def dice(a, b, regions) -> dict:
    """Per-region Dice between two label grids.

    Regions missing from both grids score 1.0 and are listed under ``absent``.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    scores, absent = {}, []
    for r in regions:
        in_a, in_b = a == r, b == r
        denom = int(in_a.sum()) + int(in_b.sum())
        if denom == 0:
            scores[int(r)] = 1.0
            absent.append(int(r))
        else:
            scores[int(r)] = 2.0 * int(np.logical_and(in_a, in_b).sum()) / denom
    average = float(np.mean(list(scores.values()))) if scores else float("nan")
    return {"scores": scores, "average": average, "absent": absent}
