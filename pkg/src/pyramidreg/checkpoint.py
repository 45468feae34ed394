"""Single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"PYRREGCK"
    4 bytes   uint32 format version (currently 1)
    8 bytes   uint64 length H of the JSON header
    H bytes   UTF-8 JSON header, keys sorted
    ...       tensor payloads, back to back, row-major little-endian

The header holds the training config and its digest, the iteration
counter, the loss history, the Adam param groups and a ``tensors`` index of
``{"name", "dtype", "shape", "offset", "nbytes"}`` entries. Offsets count
from the start of the payload section. Model tensors are named
``model/<state-dict key>``, optimizer moments ``optim/<param index>/<key>``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PYRREGCK"
VERSION = 1

_DTYPES = {
    torch.float32: ("f32", np.dtype("<f4")),
    torch.float64: ("f64", np.dtype("<f8")),
    torch.int64: ("i64", np.dtype("<i8")),
}
_BY_CODE = {code: (tdt, ndt) for tdt, (code, ndt) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    model_state: OrderedDict
    optimizer_state: dict | None = None
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def _named_tensors(ckpt: Checkpoint):
    for name, t in ckpt.model_state.items():
        yield f"model/{name}", t
    if ckpt.optimizer_state is not None:
        for idx in sorted(ckpt.optimizer_state["state"]):
            for key in sorted(ckpt.optimizer_state["state"][idx]):
                value = ckpt.optimizer_state["state"][idx][key]
                yield f"optim/{idx}/{key}", torch.as_tensor(value)


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name, tensor in _named_tensors(ckpt):
        tensor = tensor.detach().cpu()
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        code, ndt = _DTYPES[tensor.dtype]
        payload = np.ascontiguousarray(tensor.numpy(), dtype=ndt).tobytes()
        index.append(
            {"name": name, "dtype": code, "shape": list(tensor.shape), "offset": offset, "nbytes": len(payload)}
        )
        chunks.append(payload)
        offset += len(payload)
    groups = None
    if ckpt.optimizer_state is not None:
        groups = json.loads(json.dumps(ckpt.optimizer_state["param_groups"]))
    header = {
        "config": ckpt.config,
        "config_digest": ckpt.digest,
        "iteration": int(ckpt.iteration),
        "history": ckpt.history,
        "optimizer": None if groups is None else {"param_groups": groups},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20 : 20 + hlen])
        return _decode(header, memoryview(raw)[20 + hlen :])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {exc!r}") from exc


def _decode(header: dict, body) -> Checkpoint:
    model_state, optim_state = OrderedDict(), {}
    for entry in header["tensors"]:
        tdt, ndt = _BY_CODE[entry["dtype"]]
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(body):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(body[start:stop], dtype=ndt).reshape(entry["shape"])
        tensor = torch.from_numpy(arr.copy()).to(tdt)
        kind, _, rest = entry["name"].partition("/")
        if kind == "model":
            model_state[rest] = tensor
        else:
            idx, _, key = rest.partition("/")
            optim_state.setdefault(int(idx), {})[key] = tensor
    optimizer = None
    if header["optimizer"] is not None:
        groups = header["optimizer"]["param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])  # JSON has no tuples
        optimizer = {"state": optim_state, "param_groups": groups}
    ckpt = Checkpoint(header["config"], model_state, optimizer, header["iteration"], header["history"])
    if ckpt.digest != header["config_digest"]:
        raise CheckpointError("config digest does not match the stored config")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
