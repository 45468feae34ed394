"""Displacement-field warping, upsampling and composition.

Fields are tensors of shape ``(N, 3, D, H, W)`` (or unbatched ``(3, D, H, W)``)
holding displacements in voxel units of their own grid. Warping an input
reads it at ``p + u(p)`` for every output voxel ``p``; coordinates falling
outside the grid are clamped to the border voxels.

Grids at consecutive pyramid levels are related by ``fine = 2 * coarse``:
coarse voxel ``i`` sits on fine voxel ``2i`` (the centre of a stride-2,
kernel-3, padding-1 convolution), so a fine voxel ``j`` reads the coarse
grid at ``j / 2``. Under this convention an upsampled field is the
interpolated field times two, for even and odd fine extents alike.
"""

from __future__ import annotations

import torch


def identity_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel coordinates as a ``(3, D, H, W)`` tensor."""
    axes = [torch.arange(s, dtype=dtype, device=device) for s in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def _batched(src: torch.Tensor, flow: torch.Tensor):
    """Bring ``src``/``flow`` to ``(N, C, *S)``/``(N, 3, *S)`` and return an undo callable."""
    if flow.dim() == 5:
        if src.dim() != 5:
            raise ValueError(f"batched field needs a (N, C, D, H, W) source, got {tuple(src.shape)}")
        return src, flow, lambda out: out
    if flow.dim() != 4:
        raise ValueError(f"field must be (3, D, H, W) or (N, 3, D, H, W), got {tuple(flow.shape)}")
    if src.dim() == 3:
        return src[None, None], flow[None], lambda out: out[0, 0]
    if src.dim() == 4:
        return src[None], flow[None], lambda out: out[0]
    raise ValueError(f"unbatched field needs a 3D or 4D source, got {tuple(src.shape)}")


def _check_field(src, flow):
    if flow.shape[1] != 3:
        raise ValueError(f"field needs 3 components, got {flow.shape[1]}")
    if src.shape[0] != flow.shape[0] or src.shape[2:] != flow.shape[2:]:
        raise ValueError(
            f"shape mismatch: source {tuple(src.shape)} vs field {tuple(flow.shape)}"
        )


def _flat_index(i, j, k, shape):
    return (i * shape[1] + j) * shape[2] + k


def _gather(flat_src, index):
    n, c, _ = flat_src.shape
    return flat_src.gather(2, index.reshape(n, 1, -1).expand(n, c, -1))


def sample_trilinear(src: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup of ``src`` (N, C, *S) at absolute voxel ``coords`` (N, 3, *T).

    Differentiable in both the source values and the coordinates.
    """
    shape = src.shape[2:]
    n, c = src.shape[:2]
    out_shape = coords.shape[2:]
    lo, hi, frac = [], [], []
    for axis, size in enumerate(shape):
        x = coords[:, axis].clamp(0, size - 1)
        x0 = torch.floor(x).detach()
        i0 = torch.nan_to_num(x0, nan=0.0).long()  # NaN must reach the loss, not the gather
        lo.append(i0)
        hi.append((i0 + 1).clamp(max=size - 1))
        frac.append(x - x0)
    flat = src.reshape(n, c, -1)
    out = 0
    for corner in range(8):
        bits = [(corner >> (2 - a)) & 1 for a in range(3)]
        idx = _flat_index(*[hi[a] if bits[a] else lo[a] for a in range(3)], shape)
        weight = 1
        for a in range(3):
            weight = weight * (frac[a] if bits[a] else 1 - frac[a])
        out = out + _gather(flat, idx).reshape(n, c, *out_shape) * weight[:, None]
    return out


def warp_trilinear(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Resample ``src`` through ``flow``: ``out(p) = src(p + u(p))``, border-clamped."""
    src_b, flow_b, undo = _batched(src, flow)
    _check_field(src_b, flow_b)
    grid = identity_grid(flow_b.shape[2:], flow_b.dtype, flow_b.device)
    coords = grid[None] + flow_b
    return undo(sample_trilinear(src_b.to(flow_b.dtype), coords))


def warp_nearest(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Zero-order warp for label maps; rounds half away from zero, then clamps to the grid."""
    src_b, flow_b, undo = _batched(src, flow)
    _check_field(src_b, flow_b)
    shape = src_b.shape[2:]
    grid = identity_grid(shape, flow_b.dtype, flow_b.device)
    coords = grid[None] + flow_b.detach()
    idx = []
    for axis, size in enumerate(shape):
        x = coords[:, axis]
        r = torch.sign(x) * torch.floor(x.abs() + 0.5)
        idx.append(torch.nan_to_num(r, nan=0.0).clamp(0, size - 1).long())
    flat = src_b.reshape(*src_b.shape[:2], -1)
    out = _gather(flat, _flat_index(*idx, shape))
    return undo(out.reshape(src_b.shape))


def _upsample_axis(x: torch.Tensor, axis: int, n: int) -> torch.Tensor:
    size = x.shape[axis]
    j = torch.arange(n, device=x.device)
    i0 = torch.clamp(j // 2, max=size - 1)
    i1 = torch.clamp(i0 + 1, max=size - 1)
    # odd fine voxels sit halfway between two coarse voxels, unless past the border
    half = ((j % 2 == 1) & (j // 2 < size - 1)).to(x.dtype)
    view = [1] * x.dim()
    view[axis] = n
    half = half.reshape(view)
    a = x.index_select(axis, i0)
    b = x.index_select(axis, i1)
    return a + (b - a) * (0.5 * half)


def upsample(x: torch.Tensor, shape=None) -> torch.Tensor:
    """Trilinear upsampling of the trailing three axes to ``shape`` (default: doubled)."""
    spatial = x.shape[-3:]
    if shape is None:
        shape = tuple(2 * s for s in spatial)
    ndim = x.dim()
    for a, n in enumerate(shape):
        x = _upsample_axis(x, ndim - 3 + a, int(n))
    return x


def upsample_field(flow: torch.Tensor, shape=None) -> torch.Tensor:
    """Move a field to the next-finer grid: interpolate, then double the displacements."""
    if flow.shape[-4] != 3:
        raise ValueError(f"field needs 3 components, got shape {tuple(flow.shape)}")
    return 2.0 * upsample(flow, shape)


def compose(accumulated_up: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Field equivalent to warping by ``accumulated_up`` first and ``residual`` second.

    ``warp(warp(V, a), b)(p) = V(p + b(p) + a(p + b(p)))``, hence
    ``out = a(p + b(p)) + b(p)``.
    """
    if accumulated_up.shape != residual.shape:
        raise ValueError(
            f"shape mismatch: {tuple(accumulated_up.shape)} vs {tuple(residual.shape)}"
        )
    return warp_trilinear(accumulated_up, residual) + residual
