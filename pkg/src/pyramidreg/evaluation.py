"""Dice evaluation of a trained model over labelled pairs, and report files."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np
import torch

from .losses import dice
from .training import register
from .volume_io import Volume, reduce_slices, resample_to
from .warping import warp_nearest


def parse_reduction(text: str) -> tuple[int, int]:
    """``"axis:factor"`` as used on the command line, e.g. ``"1:8"``."""
    try:
        axis, factor = (int(p) for p in text.split(":"))
    except ValueError:
        raise ValueError(f"expected axis:factor, got {text!r}") from None
    if axis not in (0, 1, 2) or factor < 1:
        raise ValueError(f"bad reduction {text!r}: axis must be 0..2 and factor >= 1")
    return axis, factor


def degrade_moving(moving: Volume, axis: int, factor: int) -> Volume:
    """Keep every ``factor``-th slice (at least 2) along ``axis``, then interpolate back."""
    keep = max(2, moving.shape[axis] // factor)
    return resample_to(reduce_slices(moving, axis, keep), moving.shape)


def label_regions(*label_maps) -> list[int]:
    ids = set()
    for lm in label_maps:
        ids.update(int(r) for r in np.unique(lm) if r != 0)
    return sorted(ids)


def evaluate_pairs(model, pairs, *, reduction=None, config_digest=None, mode=None) -> dict:
    """Register each pair and score the warped moving labels against the fixed ones.

    ``reduction`` is an ``(axis, factor)`` tuple; the degraded moving volume is
    only used to predict the field, which is then applied to the labels at
    their original resolution. Timing covers the forward pass alone.
    """
    entries = []
    for rec in pairs:
        if rec.moving_labels is None or rec.fixed_labels is None:
            raise ValueError(f"pair {rec.id} has no labels")
        moving = rec.moving if reduction is None else degrade_moving(rec.moving, *reduction)
        start = time.perf_counter()
        out = register(moving.data, rec.fixed.data, model)
        elapsed = time.perf_counter() - start
        labels = torch.from_numpy(rec.moving_labels.data.astype(np.int64))
        warped = warp_nearest(labels, out.final_field.double()).numpy()
        regions = label_regions(rec.moving_labels.data, rec.fixed_labels.data)
        res = dice(warped, rec.fixed_labels.data, regions)
        entries.append({
            "id": rec.id,
            "dice": {str(r): s for r, s in res["scores"].items()},
            "average": res["average"],
            "absent": res["absent"],
            "time_s": elapsed,
        })
    return assemble_report(entries, config_digest=config_digest, mode=mode, reduction=reduction)


def assemble_report(entries: list, *, config_digest=None, mode=None, reduction=None) -> dict:
    regions = sorted({r for e in entries for r in e["dice"]}, key=int)
    region_average = {
        r: float(np.mean([e["dice"][r] for e in entries if r in e["dice"]])) for r in regions
    }
    return {
        "mode": mode,
        "config_digest": config_digest,
        "reduce_slices": None if reduction is None else f"{reduction[0]}:{reduction[1]}",
        "pairs": entries,
        "region_average": region_average,
        "average": float(np.mean([e["average"] for e in entries])),
        "mean_time_s": float(np.mean([e["time_s"] for e in entries])),
    }


def write_report(report: dict, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` (canonical) and ``<prefix>.csv`` (one row per pair and region)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = prefix.with_suffix(".json"), prefix.with_suffix(".csv")
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "region", "dice", "time_s"])
        for e in report["pairs"]:
            for r, s in e["dice"].items():
                w.writerow([e["id"], r, repr(s), repr(e["time_s"])])
            w.writerow([e["id"], "average", repr(e["average"]), repr(e["time_s"])])
        for r, s in report["region_average"].items():
            w.writerow(["mean", r, repr(s), ""])
        w.writerow(["mean", "average", repr(report["average"]), repr(report["mean_time_s"])])
    return json_path, csv_path


def load_report(path) -> dict:
    try:
        report = json.loads(Path(path).read_text())
        report["region_average"], report["average"], report["pairs"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed report {path}: {exc}") from exc
    return report
