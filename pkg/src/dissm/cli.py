"""``dissm`` command line: train, sample, bench, ablate, inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench
from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, emit, load
from .data import DatasetError, load_dataset, to_uint8, write_pnm
from .diffusion import SamplerConfig, ddpm_sample, linear_beta_schedule
from .model import PAPER_TABLE, TOY_TIERS, ConfigError, inventory_of, match_table_row, parameter_inventory
from .trainer import FINAL_CHECKPOINT, TrainingDiverged, checkpoint_config, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

ABLATION_AXES = {
    "patch": [("p", v) for v in (2, 4, 8)],
    "skip": [("skip_mode", v) for v in ("concat", "add", "none")],
    "cond": [("cond_mode", v) for v in ("token", "adaln")],
    "scale": [("tier", v) for v in TOY_TIERS],
}
SUMMARY_HEADER = ("variant", "key", "value", "params", "initial_loss", "final_loss")
MANIFEST_HEADER = ("filename", "index", "seed", "class", "cfg_scale", "steps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dissm", description="Bidirectional state-space diffusion models on numpy.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a run directory")
    t.add_argument("--config", type=Path, help="run config file (key = value lines)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("sample", help="draw images from a checkpoint")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--config", type=Path, help="fail unless the checkpoint's model matches this config")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--steps", type=int, help="sampling steps (default from the run config)")
    s.add_argument("--cfg-scale", type=float, dest="cfg_scale")
    s.add_argument("--class", type=int, dest="class_id")
    s.add_argument("--seed", type=int)
    s.add_argument("--raw-weights", action="store_true", help="use the trained weights instead of the EMA copy")
    s.add_argument("--out", type=Path, required=True)

    b = sub.add_parser("bench", help="operation counts and timings")
    b.add_argument("--J", type=_int_list, default=list(bench.DEFAULT_J))
    b.add_argument("--D", type=int, default=384)
    b.add_argument("--N", type=int, default=16)
    b.add_argument("--configs", nargs="*", metavar="NAME",
                   help=f"whole-model report for scaling-table rows (default all of {','.join(PAPER_TABLE)})")
    b.add_argument("--out", type=Path)

    a = sub.add_parser("ablate", help="train one variant per setting of an axis")
    a.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    a.add_argument("--config", type=Path)
    a.add_argument("--seed", type=int)
    a.add_argument("--steps", type=int)
    a.add_argument("--out", type=Path, required=True)

    i = sub.add_parser("inspect", help="parameter inventory of a checkpoint or config")
    i.add_argument("checkpoint", type=Path, nargs="?")
    i.add_argument("--config", type=Path)
    return p


# ---------------------------------------------------------------------------


def _run_config(path: Path | None, seed: int | None = None, steps: int | None = None) -> RunConfig:
    run = load(path) if path is not None else RunConfig()
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if steps is not None:
        changes["steps"] = steps
    return run.replace(**changes) if changes else run


def cmd_train(args) -> int:
    run = _run_config(args.config, args.seed, args.steps)
    res = train(run, out_dir=args.out)
    print(f"trained {run.train.steps} steps; smoothed loss_simple "
          f"{res.initial_loss:.4f} -> {res.final_loss:.4f}; checkpoint {args.out / FINAL_CHECKPOINT}")
    return EXIT_OK


def sample_filename(seed: int, cls: int | None, k: int, channels: int) -> str:
    tag = "u" if cls is None else str(cls)
    return f"sample_s{seed}_c{tag}_{k:04d}.{'pgm' if channels == 1 else 'ppm'}"


def cmd_sample(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    run = checkpoint_config(ckpt)
    expected = load(args.config).model if args.config is not None else None
    model = load_model(ckpt, use_ema=not args.raw_weights, expected=expected)
    mc = run.model
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.class_id is not None:
        if mc.num_classes == 0:
            raise ConfigError("--class given but the model is unconditional (num_classes=0)")
        if not 0 <= args.class_id < mc.num_classes:
            raise ConfigError(f"--class {args.class_id} out of range for num_classes={mc.num_classes}")
    changes = {}
    if args.steps is not None:
        changes["num_steps"] = args.steps
    if args.cfg_scale is not None:
        changes["guidance_scale"] = args.cfg_scale
    if args.seed is not None:
        changes["seed"] = args.seed
    try:
        sampler = SamplerConfig(**{**run.sampler.__dict__, **changes})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if mc.num_classes == 0:
        classes = None
    elif args.class_id is not None:
        classes = np.full(args.n, args.class_id, dtype=np.int64)
    else:
        classes = np.arange(args.n, dtype=np.int64) % mc.num_classes
    schedule = linear_beta_schedule(run.train.diffusion_steps, run.train.beta_1, run.train.beta_T)
    imgs = ddpm_sample(model, args.n, (mc.H, mc.W, mc.C), sampler, schedule, c=classes,
                       num_classes=mc.num_classes)

    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for k, img in enumerate(imgs):
            cls = None if classes is None else int(classes[k])
            name = sample_filename(sampler.seed, cls, k, mc.C)
            write_pnm(args.out / name, to_uint8(img))
            w.writerow([name, k, sampler.seed, "" if cls is None else cls,
                        repr(sampler.guidance_scale), sampler.num_steps])
    print(f"wrote {args.n} images to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.configs is not None:
        names = args.configs or list(PAPER_TABLE)
        unknown = [n for n in names if n not in PAPER_TABLE]
        if unknown:
            raise UsageError(f"unknown config(s) {unknown}; choose from {list(PAPER_TABLE)}")
        reports = bench.table_reports(names)
        print(bench.gflops_table(reports))
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            bench.write_gflops(args.out / "gflops.csv", reports)
        return EXIT_OK
    try:
        js = bench.validate_j_list(args.J)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.D < 1 or args.N < 1:
        raise UsageError("--D and --N must be positive")
    records = bench.run_scaling_sweep(js, args.D, args.N)
    print(bench.report_table(records))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        bench.write_records(args.out / "bench.csv", records)
    return EXIT_OK


def ablation_variants(axis: str, base: RunConfig) -> list[tuple[str, str, str, RunConfig]]:
    """``(name, key, value, config)`` for each setting of ``axis``; everything else is shared."""
    out = []
    for key, value in ABLATION_AXES[axis]:
        if key == "tier":
            cfg = base.replace(**TOY_TIERS[value])
        else:
            cfg = base.replace(**{key: value})
        out.append((f"{axis}_{value}", key, str(value), cfg))
    return out


def cmd_ablate(args) -> int:
    base = _run_config(args.config, args.seed, args.steps)
    data = load_dataset(base.train.dataset, seed=0, size=base.train.dataset_size)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, key, value, cfg in ablation_variants(args.axis, base):
        res = train(cfg, data=data, out_dir=args.out / name)
        rows.append([name, key, value, res.model.num_parameters(),
                     repr(res.initial_loss), repr(res.final_loss)])
        print(f"{name}: final smoothed loss_simple {res.final_loss:.4f}")
    with (args.out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)
    return EXIT_OK


def inspect_report(run: RunConfig, inventory: dict[str, int]) -> str:
    lines = ["config:"] + ["  " + ln for ln in emit(run).splitlines()]
    lines.append("parameters:")
    width = max(len(k) for k in inventory)
    for k, v in inventory.items():
        lines.append(f"  {k:<{width}}  {v:>12,}")
    total = sum(inventory.values())
    lines.append(f"  {'total':<{width}}  {total:>12,}  ({total / 1e6:.1f}M)")
    row = match_table_row(run.model)
    if row is not None:
        lines.append(f"table row {row}: paper: {PAPER_TABLE[row][1].params_m}M")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    if (args.checkpoint is None) == (args.config is None):
        raise UsageError("inspect takes exactly one of a checkpoint path or --config")
    if args.checkpoint is not None:
        ckpt = Checkpoint.load(args.checkpoint)
        run = checkpoint_config(ckpt)
        inventory = inventory_of(load_model(ckpt, use_ema=False))
        print(f"checkpoint step {ckpt.step}")
    else:
        run = load(args.config)
        inventory = parameter_inventory(run.model)
    print(inspect_report(run, inventory))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "bench": cmd_bench,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except T.NumericDomainError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())
