"""Command-line entry point: ``mnclglf <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure (including a failed ``check``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint
from .checks import run_all
from .config import ConfigError, EvalConfig, RunConfig, from_ini, load as load_config, full_defaults, toy_defaults
from .data import (CIFAR10, CIFAR100, DataFormatError, DataValidationError, Dataset, balanced_subset,
                   channel_stats, load_cifar_binary, load_dataset_dir, parse_records, save_split)
from .linear_eval import EvalError, evaluate
from .nets import NumericalError, StructureError
from .patching import combination_count
from .runs import RunDir, RunDirError, RunManifest, dataset_fingerprint
from .trainer import fit, with_dataset_stats

log = logging.getLogger("mnclglf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

REFERENCE_LAMBDA = 6.0
REFERENCE_K = 2
# fractions of the run at which the sample-count ablation evaluates
SAMPLE_MILESTONES = (0.25, 0.5, 0.75, 1.0)


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------

# flag dest -> (section, field)
OVERRIDES = {
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "seed": ("train", "seed"),
    "lr": ("train", "lr"),
    "ema_m": ("train", "ema_m"),
    "queue_capacity": ("train", "queue_capacity"),
    "combine_k": ("train", "combine_k"),
    "single_embedding": ("train", "single_embedding"),
    "checkpoint_every": ("train", "checkpoint_every"),
    "prefetch": ("train", "prefetch"),
    "temperature": ("loss", "temperature"),
    "lam": ("loss", "lam"),
    "backbone": ("model", "backbone"),
    "eval_epochs": ("eval", "epochs"),
    "eval_lr": ("eval", "lr"),
    "eval_batch_size": ("eval", "batch_size"),
}


def add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override the config file, with a warning)")
    g.add_argument("--config", type=Path, help="INI file with [train] [model] [augment] [loss] [eval] sections")
    g.add_argument("--preset", choices=("full", "toy"), default="full",
                   help="base configuration when --config is absent (default: full)")
    g.add_argument("--epochs", type=int, help="pretraining epochs")
    g.add_argument("--batch-size", type=int, help="pretraining batch size")
    g.add_argument("--seed", type=int, help="root seed for every random substream")
    g.add_argument("--lr", type=float, help="initial learning rate of the cosine schedule")
    g.add_argument("--ema-m", type=float, help="momentum-network EMA coefficient")
    g.add_argument("--queue-capacity", type=int, help="support queue rows")
    g.add_argument("--combine-k", type=int, choices=(1, 2, 3, 4), help="patch encodings averaged per combination")
    g.add_argument("--single-embedding", action="store_true", default=None,
                   help="use one randomly chosen combination per step instead of all")
    g.add_argument("--checkpoint-every", type=int, help="save a checkpoint every N epochs (0: only final)")
    g.add_argument("--prefetch", type=int, help="batches prepared ahead in a background thread")
    g.add_argument("--temperature", type=float, help="contrastive temperature")
    g.add_argument("--lambda", dest="lam", type=float, help="weight of the momentum-branch loss")
    g.add_argument("--backbone", choices=("resnet18-cifar", "toy-cnn"), help="encoder architecture")
    g.add_argument("--eval-epochs", type=int, help="linear-probe epochs")
    g.add_argument("--eval-lr", type=float, help="linear-probe initial learning rate")
    g.add_argument("--eval-batch-size", type=int, help="linear-probe batch size")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} does not exist")
        run = load_config(args.config)
    else:
        run = toy_defaults() if args.preset == "toy" else full_defaults()
    for dest, (section, name) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        current = getattr(getattr(run, section), name)
        if args.config is not None and value != current:
            log.warning("--%s=%s overrides [%s] %s = %s from %s", dest.replace("_", "-"), value, section, name,
                        current, args.config)
        if name == "backbone" and value != current:
            from .nets import ModelConfig
            run = dataclasses.replace(run, model=ModelConfig.toy() if value == "toy-cnn" else ModelConfig())
        else:
            run = run.with_section(section, **{name: value})
    return run


# -- data ------------------------------------------------------------------

def add_data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", type=Path, required=required,
                   help="dataset directory: converted (train.bin/.meta, eval.bin/.meta) or cifar-10-batches-bin")
    p.add_argument("--train-per-class", type=int,
                   help="use a class-balanced subset with this many training images per class")
    p.add_argument("--test-per-class", type=int,
                   help="use a class-balanced subset with this many evaluation images per class")


def load_data(args) -> tuple[Dataset, Dataset]:
    if not args.data.exists():
        raise FileNotFoundError(f"dataset directory {args.data} does not exist")
    train, test = load_dataset_dir(args.data)
    if getattr(args, "train_per_class", None):
        train = balanced_subset(train, args.train_per_class)
    if getattr(args, "test_per_class", None):
        test = balanced_subset(test, args.test_per_class)
    return train, test


# -- commands --------------------------------------------------------------

def pretrain_into(out: Path, run: RunConfig, train: Dataset, milestones=(), force=False, resume=None,
                  dtype=torch.float32, clear_on_force=True):
    """Pretrain into ``out`` unless an identical complete run is already there.

    Returns (final checkpoint, {epoch: checkpoint}, reused?).
    """
    run = with_dataset_stats(run, train)
    # the [eval] section does not affect pretraining, so changing it keeps the cache valid
    manifest = RunManifest.for_run("pretrain", dataclasses.replace(run, eval=EvalConfig()), (train,),
                                   milestones=sorted(milestones), dtype=str(dtype))
    with RunDir(out, manifest, force=force, resume=resume is not None, clear_on_force=clear_on_force) as rd:
        if rd.up_to_date:
            outs = [Path(p) for p in rd.manifest.outputs]
            marks = {int(p.stem.split("_")[1]): p for p in outs if p.name.startswith("epoch_")}
            return out / "final.ckpt", marks, True
        res = fit(train, run, out, resume=resume, milestones=milestones, dtype=dtype)
        outputs = [res.checkpoint, res.trace, out / "timing.csv", *res.milestones.values()]
        rd.complete(outputs)
        return res.checkpoint, res.milestones, False


def cmd_pretrain(args) -> int:
    run = resolve_config(args)
    train, _ = load_data(args)
    dtype = torch.float64 if args.dtype == "float64" else torch.float32
    ckpt, _, reused = pretrain_into(args.out, run, train, force=args.force, resume=args.resume, dtype=dtype)
    if reused:
        print(f"{args.out}: identical run already complete, nothing to do")
    print(f"final checkpoint: {ckpt}")
    print(f"trace: {args.out / 'trace.csv'}")
    return EXIT_OK


def _eval_config(args, base):
    changes = {}
    for dest, name in (("eval_epochs", "epochs"), ("eval_lr", "lr"), ("eval_batch_size", "batch_size")):
        if getattr(args, dest, None) is not None:
            changes[name] = getattr(args, dest)
    if getattr(args, "no_augment", False):
        changes["augment_train"] = False
    return dataclasses.replace(base, **changes)


def cmd_linear_eval(args) -> int:
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    _, config_text, _ = checkpoint.load(args.checkpoint)
    cfg = _eval_config(args, from_ini(config_text).eval)
    out = args.out or args.checkpoint.with_suffix(".eval.json")
    train, test = load_data(args)
    identity = {"checkpoint": str(args.checkpoint.resolve()), "eval": dataclasses.asdict(cfg),
                "dataset": dataset_fingerprint(train, test)}
    if out.exists():
        old = json.loads(out.read_text())
        if old.get("identity") == identity and not args.force:
            print(f"{out}: identical evaluation already recorded (top1={old['top1']:.4f})")
            return EXIT_OK
        if not args.force:
            raise RunDirError(f"{out} exists with a different evaluation; pass --force to overwrite")
    result = evaluate(args.checkpoint, train, test, cfg)
    record = {"top1": result["top1"], "top5": result["top5"], "train_top1": result["train_top1"],
              "config": dataclasses.asdict(cfg), "identity": identity}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"linear probe on {args.checkpoint}")
    print(f"  train images {len(train)}, test images {len(test)}, classes {test.class_count}")
    print(f"  top-1 {100 * result['top1']:.2f}%   top-5 {100 * result['top5']:.2f}%   "
          f"(train top-1 {100 * result['train_top1']:.2f}%)")
    print(f"  record: {out}")
    return EXIT_OK


def _dedupe(values: list, label: str) -> list:
    out = []
    for v in values:
        if v in out:
            log.warning("duplicate %s value %s ignored", label, v)
        else:
            out.append(v)
    return out


def proportional_milestones(epochs: int) -> list[int]:
    return sorted({max(1, round(f * epochs)) for f in SAMPLE_MILESTONES}) if epochs else [0]


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    train, test = load_data(args)
    out: Path = args.out
    dtype = torch.float64 if args.dtype == "float64" else torch.float32
    if args.axis == "lambda":
        values = _dedupe([float(v) for v in args.values or ()], "lambda")
        if not values:
            raise UsageError("ablate lambda needs --values")
        if any(v <= 0 for v in values):
            raise UsageError("lambda values must be positive")
        plans = [(f"lambda_{v:g}", {"lambda": v}, base.with_section("loss", lam=v), None) for v in values]
    elif args.axis == "k":
        values = _dedupe([int(v) for v in args.values or ()], "k")
        if not values:
            raise UsageError("ablate k needs --values (a subset of 1 2 3 4)")
        if any(v not in (1, 2, 3, 4) for v in values):
            raise UsageError("k values must be in 1..4")
        plans = [(f"k_{v}", {"k": v, "s": combination_count(v)}, base.with_section("train", combine_k=v), None)
                 for v in values]
    else:
        if args.values:
            raise UsageError("ablate samples takes no --values")
        marks = proportional_milestones(base.train.epochs)
        plans = [(name, {"mode": name}, base.with_section("train", single_embedding=single), marks)
                 for name, single in (("full", False), ("single", True))]

    manifest = RunManifest.for_run(f"ablate {args.axis}", base, (train, test),
                                   plans=[p[0] for p in plans], eval=dataclasses.asdict(_eval_config(args, base.eval)))
    rows: list[dict] = []
    failures = 0
    with RunDir(out, manifest, force=args.force, clear_on_force=False) as rd:
        if rd.up_to_date:
            print(f"{out}: identical ablation already complete; see {out / 'results.csv'}")
            return EXIT_OK
        for name, labels, run, marks in plans:
            try:
                ckpt, saved, reused = pretrain_into(out / "runs" / name, run, train, milestones=marks or (),
                                                    force=True, dtype=dtype, clear_on_force=True)
                if reused:
                    log.info("%s: reusing cached pretraining checkpoint", name)
                cfg = _eval_config(args, run.eval)
                points = sorted(saved.items()) if marks else [(run.train.epochs, ckpt)]
                for epoch, path in points:
                    res = evaluate(path, train, test, cfg)
                    rows.append({**labels, "epoch": epoch, "top1": res["top1"], "top5": res["top5"],
                                 "status": "ok"})
                    print(f"{name} epoch {epoch}: top-1 {100 * res['top1']:.2f}%", flush=True)
            except (NumericalError, DataValidationError, EvalError, RunDirError) as e:
                failures += 1
                log.error("%s failed: %s", name, e)
                rows.append({**labels, "epoch": "", "top1": "", "top5": "", "status": f"failed: {e}"})
            _write_table(out, rows)
        rd.complete([out / "results.csv", out / "results.json"])
    _print_table(args.axis, rows)
    return EXIT_NUMERIC if failures else EXIT_OK


def _write_table(out: Path, rows: list[dict]) -> None:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    (out / "results.json").write_text(json.dumps(rows, indent=2) + "\n")


def _print_table(axis: str, rows: list[dict]) -> None:
    print()
    for r in rows:
        label = " ".join(f"{k}={r[k]}" for k in r if k not in ("top1", "top5", "status", "epoch"))
        acc = f"top-1 {100 * r['top1']:6.2f}%  top-5 {100 * r['top5']:6.2f}%" if r["status"] == "ok" else r["status"]
        mark = ""
        if (axis == "k" and r.get("k") == REFERENCE_K) or (axis == "lambda" and r.get("lambda") == REFERENCE_LAMBDA):
            mark = " *"
        print(f"  {label:<20} epoch {r['epoch']!s:>4}  {acc}{mark}")
    if axis == "k":
        print(f"  * k = {REFERENCE_K} (s = {combination_count(REFERENCE_K)}) is the reference setting, "
              "best in the full-scale sweep")
    if axis == "lambda":
        print(f"  * lambda = {REFERENCE_LAMBDA:g} is the reference setting")


def cmd_check(args) -> int:
    results = run_all(ema_override=args.corrupt_ema, invariant_steps=args.steps, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_stats(args) -> int:
    path: Path = args.data
    if path.is_dir():
        ds, _ = load_dataset_dir(path)
    elif path.exists():
        ds = load_cifar_binary(path, CIFAR10)
    else:
        raise FileNotFoundError(f"{path} does not exist")
    mean, std = channel_stats(ds)
    print(f"# {len(ds)} training images, {ds.shape[0]} channels, {ds.shape[1]}x{ds.shape[2]}")
    print("[augment]")
    print("mean = " + ", ".join(f"{v:.6f}" for v in mean))
    print("std = " + ", ".join(f"{v:.6f}" for v in std))
    return EXIT_OK


def cmd_convert(args) -> int:
    src, dst = args.source, args.dest
    if not src.exists():
        raise FileNotFoundError(f"{src} does not exist")
    if args.format == "cifar10":
        from .data import load_cifar10_batches

        train, test = load_cifar10_batches(src)
        label_bytes = 1
    elif args.format == "cifar100":
        train = parse_records((src / "train.bin").read_bytes(), CIFAR100, "train")
        test = parse_records((src / "test.bin").read_bytes(), CIFAR100, "eval")
        label_bytes = 1
    else:
        from .imagefolder import load_image_folder

        train, test = load_image_folder(src, size=args.size)
        label_bytes = 1 if train.class_count <= 256 else 2
    for ds in (train, test):
        save_split(ds, dst, label_bytes)
    print(f"wrote {len(train)} train and {len(test)} eval records "
          f"({train.shape[1]}x{train.shape[2]}, {train.class_count} classes) to {dst}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mnclglf", description="Multi-network contrastive pretraining, linear evaluation and self-checks.",
        epilog="exit codes: 0 success, 2 usage/configuration, 3 data, 4 numerical failure")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    add_config_args(p)
    add_data_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory (one run per directory)")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint of an identical interrupted run")
    p.add_argument("--force", action="store_true", help="replace whatever the output directory holds")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="training precision")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("linear-eval", help="linear probe on a frozen pretrained backbone")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by pretrain")
    add_data_args(p)
    p.add_argument("--out", type=Path, help="result record (default: <checkpoint>.eval.json)")
    p.add_argument("--eval-epochs", type=int, help="probe epochs (default from the checkpoint's config)")
    p.add_argument("--eval-lr", type=float, help="probe initial learning rate")
    p.add_argument("--eval-batch-size", type=int, help="probe batch size")
    p.add_argument("--no-augment", action="store_true", help="train the probe on un-augmented images")
    p.add_argument("--force", action="store_true", help="overwrite an existing result record")
    p.set_defaults(func=cmd_linear_eval)

    p = sub.add_parser("ablate", help="sweep lambda or k, or compare full vs single-embedding training")
    p.add_argument("axis", choices=("lambda", "k", "samples"))
    p.add_argument("--values", nargs="*", help="sweep values (lambda: positive floats; k: subset of 1 2 3 4)")
    add_config_args(p)
    add_data_args(p)
    p.add_argument("--out", type=Path, required=True, help="output directory; runs are cached under runs/")
    p.add_argument("--no-augment", action="store_true", help="train probes on un-augmented images")
    p.add_argument("--force", action="store_true", help="re-run even if the directory holds another sweep")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="training precision")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("check", help="run the reference-implementation and invariant checks")
    p.add_argument("--steps", type=int, default=200, help="training steps for the invariant check")
    p.add_argument("--seed", type=int, default=0, help="seed for the randomized checks")
    p.add_argument("--corrupt-ema", type=float, metavar="M",
                   help="test hook: train with EMA coefficient M while expecting the configured one; "
                        "the EMA checks must then fail")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("stats", help="print per-channel normalization constants of a training set")
    p.add_argument("data", type=Path, help="dataset directory or a single CIFAR-10 binary batch file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("convert", help="convert a dataset to the flat binary record layout")
    p.add_argument("format", choices=("cifar10", "cifar100", "imagefolder"),
                   help="cifar10: cifar-10-batches-bin; cifar100: cifar-100-binary; "
                        "imagefolder: <src>/train/<class>/... and <src>/val/<class>/... "
                        "(a Tiny ImageNet val/val_annotations.txt is understood)")
    p.add_argument("source", type=Path)
    p.add_argument("dest", type=Path)
    p.add_argument("--size", type=int, help="resize images to SIZE x SIZE (imagefolder only)")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, RunDirError, StructureError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataFormatError, DataValidationError, EvalError, checkpoint.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
