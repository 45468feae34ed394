"""``pyramidreg`` command line: synth | train | register | evaluate | plot.

All subcommands read one JSON config file with a section per subcommand
(``synth``, ``train``). Exit codes: 0 ok, 1 usage or config, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .dataset import SynthConfig, load_pairs, write_dataset
from .evaluation import evaluate_pairs, load_report, parse_reduction, write_report
from .training import (
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    model_from_checkpoint,
    register,
    train,
)
from .volume_io import Volume, VolumeFormatError, load_volume, save_field, save_volume
from .warping import upsample_field, warp_trilinear

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read_config(path, section: str) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or not isinstance(cfg.get(section, {}), dict):
        raise UsageError(f"config {path}: section {section!r} must be an object")
    return cfg.get(section, {})


def cmd_synth(args) -> None:
    try:
        cfg = SynthConfig.from_dict(_read_config(args.config, "synth"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from exc
    manifest = write_dataset(cfg, args.out)
    print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")


def _train_config(args) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict(_read_config(args.config, "train"))
        if args.iterations is not None:
            cfg.iterations = args.iterations
            cfg.__post_init__()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc
    return cfg


def cmd_train(args) -> None:
    cfg = _train_config(args)
    records = load_pairs(args.data, split="train")
    pairs = [(r.moving.data, r.fixed.data) for r in records]
    state = None
    if args.resume:
        state = TrainState.from_checkpoint(load_checkpoint(args.out), cfg)
        print(f"resuming at step {state.iteration}")
    loss_csv = Path(args.loss_csv or f"{args.out}.loss.csv")
    loss_csv.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume and loss_csv.is_file() else "w"
    with loss_csv.open(mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["step", "loss", "nlcc", "smooth"])

        def on_step(rec):
            w.writerow([rec["step"], repr(rec["loss"]), repr(rec["nlcc"]), repr(rec["smooth"])])
            if not args.quiet and (rec["step"] + 1) % 50 == 0:
                print(f"step {rec['step'] + 1}: loss {rec['loss']:.5f}", flush=True)

        state = train(pairs, cfg, state=state, on_step=on_step, checkpoint_path=args.out)
    print(f"checkpoint {args.out} at step {state.iteration}; loss log {loss_csv}")


def _check_shape(ckpt, shape) -> None:
    expected = tuple(ckpt.config.get("input_shape", shape))
    if tuple(shape) != expected:
        raise DataError(f"volume shape {tuple(shape)} does not match checkpoint input_shape {expected}")


def cmd_register(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    moving, fixed = load_volume(args.moving), load_volume(args.fixed)
    if moving.shape != fixed.shape:
        raise DataError(f"shape mismatch: moving {moving.shape} vs fixed {fixed.shape}")
    _check_shape(ckpt, moving.shape)
    out = register(moving.data, fixed.data, model)
    out_dir = Path(args.out)
    save_field(out.final_field.numpy(), out_dir / "final_field")
    save_volume(Volume(out.warped.numpy(), moving.spacing), out_dir / "warped")
    if args.emit_levels:
        import torch

        src = torch.from_numpy(moving.data)
        levels = [(i, acc) for i, acc in enumerate(out.accumulated, 1) if acc is not None]
        for i, acc in levels:
            save_field(acc.numpy(), out_dir / f"level{i}_field")
            full = upsample_field(acc, moving.shape)
            save_volume(Volume(warp_trilinear(src, full).numpy(), moving.spacing), out_dir / f"level{i}_warped")
        print(f"wrote {len(levels)} level fields")
    print(f"wrote final_field and warped to {out_dir}")


def cmd_evaluate(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    try:
        reduction = parse_reduction(args.reduce_slices) if args.reduce_slices else None
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    pairs = load_pairs(args.data, split=args.split, labels=True)
    for rec in pairs:
        _check_shape(ckpt, rec.moving.shape)
    report = evaluate_pairs(
        model, pairs, reduction=reduction, config_digest=ckpt.digest, mode=ckpt.config.get("mode")
    )
    json_path, csv_path = write_report(report, args.out)
    print(f"average dice {report['average']:.4f} over {len(pairs)} pairs; wrote {json_path} and {csv_path}")


def cmd_plot(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not args.reports:
        raise UsageError("plot needs at least one report")
    try:
        reports = [load_report(p) for p in args.reports]
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    names = args.labels or [Path(p).stem for p in args.reports]
    if len(names) != len(reports):
        raise UsageError("--labels must name every report")
    regions = sorted({r for rep in reports for r in rep["region_average"]}, key=int)
    groups = regions + ["average"]
    values = np.array([
        [rep["region_average"].get(g, np.nan) if g != "average" else rep["average"] for g in groups]
        for rep in reports
    ])

    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with prefix.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "series", "value"])
        for gi, g in enumerate(groups):
            for si, name in enumerate(names):
                w.writerow([g, name, repr(float(values[si, gi]))])

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(groups)), 3.5))
    width = 0.8 / len(reports)
    x = np.arange(len(groups))
    for si, name in enumerate(names):
        ax.bar(x + (si - (len(reports) - 1) / 2) * width, values[si], width, label=name)
    ax.set_xticks(x, [f"region {g}" if g != "average" else g for g in groups])
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(prefix.with_suffix(".svg"))
    plt.close(fig)
    print(f"wrote {prefix.with_suffix('.svg')} and {prefix.with_suffix('.csv')}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyramidreg", description="Pyramid deformable registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config; uses its 'synth' section")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on the train split")
    p.add_argument("--config", help="JSON config; uses its 'train' section")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint file (also the resume source)")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    p.add_argument("--loss-csv", help="loss log path (default <out>.loss.csv)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one moving volume to a fixed one")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--emit-levels", action="store_true", help="also write every level's field and warped volume")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="Dice report over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report prefix; writes .json and .csv")
    p.add_argument("--split", default="test", help="manifest split to evaluate (default test)")
    p.add_argument("--reduce-slices", metavar="AXIS:FACTOR", help="thin the moving volume before registering")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="grouped bar chart of one or more reports")
    p.add_argument("reports", nargs="*")
    p.add_argument("--labels", nargs="+", help="series names (default: report file stems)")
    p.add_argument("--out", required=True, help="output prefix; writes .svg and .csv")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, VolumeFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
