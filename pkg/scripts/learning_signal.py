"""Pretrain-then-probe runs at the scaled-down acceptance setting, on any dataset directory.

For every seed: a full-combination run (probed at milestones and at the end),
optionally a single-embedding run, and a probe on the untrained encoder.
Prints one line per seed and writes ``results.json`` into ``--out``.

    python scripts/learning_signal.py --data data/surrogate --out runs/signal --seeds 0 1 2 --single
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from mnclglf import experiments
from mnclglf.config import toy_defaults
from mnclglf.data import balanced_subset, load_dataset_dir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--probe-epochs", type=int, default=90)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--milestones", type=int, nargs="*", default=[10, 20])
    ap.add_argument("--single", action="store_true", help="also run the single-embedding mode")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)

    train, test = load_dataset_dir(args.data)
    train, test = balanced_subset(train, args.train_per_class), balanced_subset(test, args.test_per_class)
    run = toy_defaults(epochs=args.epochs, batch_size=args.batch_size)
    run = experiments.with_probe_epochs(run, args.probe_epochs)
    args.out.mkdir(parents=True, exist_ok=True)
    results = []
    for seed in args.seeds:
        start = time.perf_counter()
        full = experiments.pretrain_and_probe(train, test, args.out / f"full-{seed}", seed, run,
                                              milestones=tuple(args.milestones))
        rnd = experiments.random_encoder_probe(train, test, args.out / f"random-{seed}", seed, run)
        row = {"seed": seed, "full_top1": full.top1, "full_top5": full.top5, "random_top1": rnd,
               "full_by_epoch": full.milestone_top1, "trace_sha256": full.trace_digest}
        if args.single:
            single = experiments.pretrain_and_probe(train, test, args.out / f"single-{seed}", seed, run,
                                                    single_embedding=True)
            row["single_top1"] = single.top1
            row["full_reaches_single_at"] = experiments.reaches_within(full, single.top1, args.epochs)
        row["seconds"] = time.perf_counter() - start
        results.append(row)
        print(json.dumps(row), flush=True)
        (args.out / "results.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
