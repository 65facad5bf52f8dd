"""Scaled-down pretrain-then-probe experiments (learning signal, efficiency, determinism)."""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import EvalConfig, RunConfig, toy_defaults
from .data import Dataset, balanced_subset, load_dataset_dir
from .linear_eval import evaluate
from .trainer import fit

log = logging.getLogger(__name__)

CIFAR_ENV = "MNCLGLF_CIFAR10"
DEFAULT_CIFAR_DIR = Path("data/cifar-10-batches-bin")


class DatasetUnavailable(FileNotFoundError):
    pass


def cifar10_dir() -> Path:
    return Path(os.environ.get(CIFAR_ENV, DEFAULT_CIFAR_DIR))


def cifar10_subsets(train_per_class: int = 200, test_per_class: int = 100) -> tuple[Dataset, Dataset]:
    """Class-balanced CIFAR-10 subsets (2,000 train / 1,000 held-out by default)."""
    path = cifar10_dir()
    if not path.exists():
        raise DatasetUnavailable(
            f"CIFAR-10 not found at {path}; point {CIFAR_ENV} at cifar-10-batches-bin or a converted directory")
    train, test = load_dataset_dir(path)
    return balanced_subset(train, train_per_class), balanced_subset(test, test_per_class)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class PretrainProbe:
    seed: int
    single_embedding: bool
    top1: float
    top5: float
    trace_digest: str
    checkpoint: Path
    milestone_top1: dict[int, float] = field(default_factory=dict)


def pretrain_and_probe(train: Dataset, test: Dataset, out_dir, seed: int, run: RunConfig | None = None,
                       single_embedding: bool = False, milestones=(), probe: EvalConfig | None = None
                       ) -> PretrainProbe:
    run = run or toy_defaults()
    run = run.with_section("train", seed=seed, single_embedding=single_embedding)
    probe = probe or run.eval
    res = fit(train, run, out_dir, milestones=milestones)
    accs = {}
    for epoch, path in sorted(res.milestones.items()):
        accs[epoch] = evaluate(path, train, test, probe)["top1"]
        log.info("seed %d single=%s epoch %d probe top-1 %.4f", seed, single_embedding, epoch, accs[epoch])
    final = evaluate(res.checkpoint, train, test, probe)
    accs[run.train.epochs] = final["top1"]
    return PretrainProbe(seed, single_embedding, final["top1"], final["top5"], file_digest(res.trace),
                         res.checkpoint, accs)


def random_encoder_probe(train: Dataset, test: Dataset, out_dir, seed: int, run: RunConfig | None = None,
                         probe: EvalConfig | None = None) -> float:
    """Probe accuracy of the untrained encoder with the same initialization as ``seed``'s run."""
    run = (run or toy_defaults()).with_section("train", seed=seed, epochs=0)
    res = fit(train, run, out_dir)
    return evaluate(res.checkpoint, train, test, probe or run.eval)["top1"]


def reaches_within(full: PretrainProbe, target: float, max_epoch: int) -> int | None:
    """Earliest evaluated epoch <= max_epoch at which ``full`` matches ``target``, else None."""
    for epoch, acc in sorted(full.milestone_top1.items()):
        if epoch <= max_epoch and acc >= target:
            return epoch
    return None


def with_probe_epochs(run: RunConfig, epochs: int) -> RunConfig:
    return replace(run, eval=replace(run.eval, epochs=epochs))
