"""Seeded ellipsoid phantoms and smooth ground-truth deformations."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .volume_io import LabelMap, Volume, normalize
from .warping import warp_nearest, warp_trilinear

MAX_ATTEMPTS = 50
MIN_REGION_VOXELS = 8


@dataclass
class PhantomSpec:
    shape: tuple = (32, 32, 32)
    num_regions: int = 4
    amplitude: float = 3.0
    smoothness_sigma: float = 16.0
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) != 3 or min(self.shape) < 2:
            raise ValueError(f"shape must be 3 extents >= 2, got {self.shape}")
        if not 2 <= self.num_regions <= 255:
            raise ValueError(f"num_regions must lie in [2, 255], got {self.num_regions}")
        if self.amplitude < 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.smoothness_sigma <= 0:
            raise ValueError(f"smoothness_sigma must be > 0, got {self.smoothness_sigma}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d


def _ellipsoid(grid, center, radii, rotation):
    offset = grid - center[:, None, None, None]
    local = np.einsum("ij,j...->i...", rotation.T, offset)
    return np.sum((local / radii[:, None, None, None]) ** 2, axis=0) <= 1.0


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _paint_labels(spec: PhantomSpec, rng) -> np.ndarray:
    """Nested ellipsoids painted outside-in: labels 1..K-1 end up as shells, K as the core."""
    shape = np.array(spec.shape, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(s) for s in spec.shape], indexing="ij")).astype(np.float64)
    k_max = spec.num_regions
    for _ in range(MAX_ATTEMPTS):
        centre = (shape - 1) / 2 + rng.uniform(-0.05, 0.05, 3) * shape
        outer = rng.uniform(0.3, 0.42, 3) * shape
        labels = np.zeros(spec.shape, dtype=np.uint16)
        for k in range(1, k_max + 1):
            scale = 1 - (k - 1) / k_max * rng.uniform(0.85, 1.0)
            radii = outer * scale * rng.uniform(0.9, 1.1, 3)
            center = centre + rng.uniform(-0.03, 0.03, 3) * shape
            labels[_ellipsoid(grid, center, radii, _random_rotation(rng))] = k
        counts = np.bincount(labels.ravel(), minlength=k_max + 1)[1:]
        if counts.min() >= MIN_REGION_VOXELS:
            return labels
    raise ValueError(
        f"could not fit {k_max} regions into shape {spec.shape} after {MAX_ATTEMPTS} attempts"
    )


def make_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    rng = np.random.default_rng([spec.seed, 0])
    labels = _paint_labels(spec, rng)
    # distinct, well separated region intensities; background stays 0
    levels = rng.permutation(np.linspace(0.3, 1.0, spec.num_regions))
    intensity = np.concatenate([[0.0], levels])[labels]
    if spec.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, spec.shape)
    return normalize(Volume(intensity)), LabelMap(labels)


def random_smooth_field(shape, amplitude: float, smoothness_sigma: float, seed: int) -> np.ndarray:
    """Gaussian-smoothed white noise, rescaled so the largest component magnitude is ``amplitude``."""
    shape = tuple(int(s) for s in shape)
    if amplitude == 0:
        return np.zeros((3, *shape), dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    noise = rng.normal(size=(3, *shape))
    field = np.stack([gaussian_filter(c, smoothness_sigma, truncate=3.0) for c in noise])
    return field * (amplitude / np.abs(field).max())


@dataclass
class SyntheticPair:
    moving: Volume
    fixed: Volume
    moving_labels: LabelMap
    fixed_labels: LabelMap
    gt_field: np.ndarray


def make_pair(spec: PhantomSpec) -> SyntheticPair:
    """Fixed phantom plus a moving copy resampled through a known smooth field."""
    fixed, fixed_labels = make_phantom(spec)
    gt = random_smooth_field(spec.shape, spec.amplitude, spec.smoothness_sigma, spec.seed)
    flow = torch.from_numpy(gt)
    moving = warp_trilinear(torch.from_numpy(fixed.data.astype(np.float64)), flow)
    moving_labels = warp_nearest(torch.from_numpy(fixed_labels.data.astype(np.int64)), flow)
    return SyntheticPair(
        moving=Volume(moving.numpy().astype(np.float32)),
        fixed=fixed,
        moving_labels=LabelMap(moving_labels.numpy()),
        fixed_labels=fixed_labels,
        gt_field=gt.astype(np.float32),
    )
