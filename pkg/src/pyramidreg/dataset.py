"""On-disk synthetic datasets: a directory of pair folders plus ``manifest.json``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .synthdata import PhantomSpec, make_pair
from .volume_io import (
    VolumeFormatError,
    load_field,
    load_labels,
    load_volume,
    save_field,
    save_labels,
    save_volume,
)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
FILES = ("moving", "fixed", "moving_labels", "fixed_labels", "gt_field")


@dataclass
class SynthConfig:
    n_train: int = 24
    n_test: int = 8
    seed: int = 0
    phantom: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ValueError(f"need a positive pair count, got n_train={self.n_train}, n_test={self.n_test}")
        if "seed" in self.phantom:
            raise ValueError("per-pair seeds are derived from the dataset seed; drop phantom.seed")
        # validates shape, region count, amplitude and sigma up front
        PhantomSpec(**self.phantom)

    def pair_seeds(self) -> list[int]:
        n = self.n_train + self.n_test
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(n, dtype=np.uint64)]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def write_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Generate every pair of ``cfg`` under ``out_dir`` and return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, seed in enumerate(cfg.pair_seeds()):
        pair_id = f"pair{k:03d}"
        pair = make_pair(PhantomSpec(**cfg.phantom, seed=seed))
        base = out_dir / pair_id
        save_volume(pair.moving, base / "moving")
        save_volume(pair.fixed, base / "fixed")
        save_labels(pair.moving_labels, base / "moving_labels")
        save_labels(pair.fixed_labels, base / "fixed_labels")
        save_field(pair.gt_field, base / "gt_field")
        entries.append({
            "id": pair_id,
            "split": "train" if k < cfg.n_train else "test",
            "seed": seed,
            **{name: f"{pair_id}/{name}" for name in FILES},
        })
    manifest = {"version": MANIFEST_VERSION, "synth": asdict(cfg), "pairs": entries}
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        raise VolumeFormatError(f"no {MANIFEST} in {data_dir}")
    try:
        manifest = json.loads(path.read_text())
        pairs = manifest["pairs"]
        for entry in pairs:
            entry["id"], entry["split"], entry["moving"], entry["fixed"]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"malformed manifest {path}: {exc}") from exc
    return manifest


@dataclass
class PairRecord:
    id: str
    moving: object
    fixed: object
    moving_labels: object = None
    fixed_labels: object = None
    gt_field: np.ndarray | None = None


def load_pairs(data_dir, split: str | None = None, labels: bool = False) -> list[PairRecord]:
    """Load the pairs of one split (all pairs when ``split`` is None).

    With ``labels=True`` both label maps must be present.
    """
    data_dir = Path(data_dir)
    records = []
    for entry in load_manifest(data_dir)["pairs"]:
        if split is not None and entry["split"] != split:
            continue
        rec = PairRecord(
            entry["id"], load_volume(data_dir / entry["moving"]), load_volume(data_dir / entry["fixed"])
        )
        if labels:
            for name in ("moving_labels", "fixed_labels"):
                if name not in entry:
                    raise VolumeFormatError(f"pair {entry['id']} has no {name}")
                setattr(rec, name, load_labels(data_dir / entry[name]))
        if "gt_field" in entry and (data_dir / f"{entry['gt_field']}.json").is_file():
            rec.gt_field = load_field(data_dir / entry["gt_field"])
        records.append(rec)
    if not records:
        raise VolumeFormatError(f"no {split or ''} pairs in {data_dir}".replace("  ", " "))
    return records
