"""Volume and label containers, the native raw+JSON file format, and preprocessing.

A volume on disk is a pair of files sharing a stem::

    brain.json   {"shape": [s0, s1, s2], "dtype": "f32", "spacing": [1.0, 1.0, 1.0]}
    brain.raw    little-endian payload, row-major (s0 slowest)

Label maps use ``"dtype": "u16"``; displacement fields use ``"f32"`` with a
leading component axis, ``"shape": [3, s0, s1, s2]``.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class VolumeFormatError(ValueError):
    """Raised when a file pair is missing, inconsistent, or holds bad values."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 2:
            raise ValueError(f"every volume axis needs >= 2 voxels, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    region_ids: list[int] = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label map must be 3D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise ValueError("labels must fit in uint16")
        self.data = arr.astype(np.uint16)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.region_ids = [int(r) for r in np.unique(self.data) if r != 0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# -- native format ---------------------------------------------------------


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        return path.with_suffix("")
    return path


def write_array(arr: np.ndarray, path, dtype: str, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write ``arr`` as a sidecar/payload pair. Non-finite floats are refused."""
    if dtype not in DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(arr)
    if dtype == "f32" and not np.all(np.isfinite(arr)):
        raise VolumeFormatError("refusing to write non-finite values")
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": [int(s) for s in arr.shape],
        "dtype": dtype,
        "spacing": [float(s) for s in spacing],
    }
    payload = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes(order="C")
    stem.with_suffix(".json").write_text(json.dumps(header, sort_keys=True) + "\n")
    stem.with_suffix(".raw").write_bytes(payload)


def read_array(path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    header_path, raw_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    for p in (header_path, raw_path):
        if not p.is_file():
            raise VolumeFormatError(f"missing file: {p}")
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(s) for s in header["shape"])
        dtype = DTYPES[header["dtype"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad header {header_path}: {exc}") from exc
    payload = raw_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"size mismatch: {raw_path} has {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    if dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise VolumeFormatError(f"non-finite values in {raw_path}")
    return arr.copy(), header


def _spacing(header) -> tuple:
    return tuple(header.get("spacing", (1.0, 1.0, 1.0)))


def load_volume(path) -> Volume:
    arr, header = read_array(path)
    if arr.ndim != 3:
        raise VolumeFormatError(f"expected a 3D volume, got shape {arr.shape}")
    return Volume(arr.astype(np.float32), _spacing(header))


def save_volume(v: Volume, path) -> None:
    write_array(v.data, path, "f32", v.spacing)


def load_labels(path) -> LabelMap:
    arr, header = read_array(path)
    if arr.ndim != 3:
        raise VolumeFormatError(f"expected a 3D label map, got shape {arr.shape}")
    return LabelMap(arr, _spacing(header))


def save_labels(labels: LabelMap, path) -> None:
    write_array(labels.data, path, "u16", labels.spacing)


def load_field(path) -> np.ndarray:
    arr, _ = read_array(path)
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise VolumeFormatError(f"expected a (3, s0, s1, s2) field, got {arr.shape}")
    return arr.astype(np.float32)


def save_field(u, path) -> None:
    u = np.asarray(u, dtype=np.float32)
    if u.ndim != 4 or u.shape[0] != 3:
        raise VolumeFormatError(f"expected a (3, s0, s1, s2) field, got {u.shape}")
    write_array(u, path, "f32")


# -- NIfTI-1 import ----------------------------------------------------------

_NIFTI_DTYPES = {
    2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2", 768: "u4",
}


def load_nifti(path) -> Volume:
    """Read the voxel grid of a single-file NIfTI-1 image (``.nii`` or ``.nii.gz``).

    Only the first three dimensions, pixdim and the scl_slope/scl_inter
    rescale are honoured; orientation matrices are ignored.
    """
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise VolumeFormatError(f"{path}: too short for a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise VolumeFormatError(f"{path}: not a NIfTI-1 file")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if datatype not in _NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    ndim = dim[0]
    shape = tuple(dim[1:4])
    if ndim < 3 or any(d > 1 for d in dim[4 : 1 + ndim]):
        raise VolumeFormatError(f"{path}: expected a scalar 3D image, dim={dim}")
    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    buf = raw[vox_offset : vox_offset + count * dtype.itemsize]
    if len(buf) != count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: size mismatch in voxel payload")
    # NIfTI stores x fastest.
    data = np.frombuffer(buf, dtype=dtype).reshape(shape[::-1]).transpose(2, 1, 0)
    data = data.astype(np.float64)
    if slope not in (0.0,) and np.isfinite(slope):
        data = data * slope + inter
    spacing = tuple(abs(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return Volume(data.astype(np.float32), spacing)


# -- preprocessing ------------------------------------------------------------


def normalize(v: Volume) -> Volume:
    lo, hi = float(v.data.min()), float(v.data.max())
    if hi == lo:
        return Volume(np.zeros_like(v.data), v.spacing)
    out = (v.data.astype(np.float64) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def crop_window(shape, target) -> tuple[slice, ...]:
    """Centered crop slices; an odd excess leaves the extra voxel removed at the high end."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t > s or t < 1 for t, s in zip(target, shape)):
        raise ValueError(f"crop target {target} does not fit in shape {tuple(shape)}")
    return tuple(slice((s - t) // 2, (s - t) // 2 + t) for s, t in zip(shape, target))


def center_crop(v, target):
    window = crop_window(v.shape, target)
    return type(v)(v.data[window].copy(), v.spacing)


def slice_indices(size: int, keep: int) -> np.ndarray:
    j = np.arange(keep, dtype=np.float64)
    return np.floor(j * (size - 1) / (keep - 1) + 0.5).astype(np.int64)


def reduce_slices(v, axis: int, keep: int):
    """Keep ``keep`` evenly spaced slices along ``axis`` (first and last always kept)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    size = v.shape[axis]
    if not 2 <= keep <= size:
        raise ValueError(f"keep must lie in [2, {size}], got {keep}")
    spacing = list(v.spacing)
    spacing[axis] *= (size - 1) / (keep - 1)
    data = np.take(v.data, slice_indices(size, keep), axis=axis)
    return type(v)(data, tuple(spacing))


def _resize_axis(arr: np.ndarray, axis: int, n: int) -> np.ndarray:
    size = arr.shape[axis]
    if n == size:
        return arr
    x = np.linspace(0.0, size - 1, n)
    i0 = np.clip(np.floor(x).astype(np.int64), 0, size - 2)
    w = x - i0
    shape = [1] * arr.ndim
    shape[axis] = n
    w = w.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1 - w) + np.take(arr, i0 + 1, axis=axis) * w


def resample_to(v: Volume, target) -> Volume:
    """Trilinear resampling onto a ``target`` grid whose corner voxels coincide with ``v``'s."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 2:
        raise ValueError(f"resample target must be 3 extents >= 2, got {target}")
    out = v.data.astype(np.float64)
    for axis, n in enumerate(target):
        out = _resize_axis(out, axis, n)
    spacing = tuple(
        sp * (s - 1) / (t - 1) for sp, s, t in zip(v.spacing, v.shape, target)
    )
    return Volume(out.astype(np.float32), spacing)
