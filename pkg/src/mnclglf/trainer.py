"""Three-branch pretraining loop.

One optimizer step, in order:

 1. three views x1, x2, x3 of the batch
 2. p1, p2, p3 from the online stack
 3. z1', z2' from the momentum stack on x1, x2
 4. z1n, z2n: nearest support-queue neighbours of z1', z2'
 5. c1, c3: divide/encode/combine/project of x1, x3 by the stop-gradient stack
 6. loss_s + lambda * loss_m
 7. backward and SGD step on the online stack
 8. EMA update of the momentum stack
 9. re-tie the stop-gradient stack
10. enqueue z1'
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .augment import AugmentPolicy, make_triple
from .config import RunConfig, from_ini, to_ini
from .data import Dataset, ImageBatch, batches, channel_stats, prefetch
from .loss import LossReport, total_loss
from .nets import (NetworkStack, NumericalError, Role, build_online, follower, forward_backprop,
                   forward_momentum, momentum_update, tie_weights)
from .patching import combination_count, local_branch
from .seeding import generator, substream
from .support import SupportQueue, enqueue, init_random, nn_lookup

log = logging.getLogger(__name__)

TRACE_FIELDS = ("step", "epoch", "lr", "loss_s", "loss_m", "loss_total", "nn_cos_mean")


def cosine_lr(step: int, total_steps: int, lr0: float, lr_final: float = 0.0) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if total_steps <= 0 or step >= total_steps:
        return lr_final
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class StepTrace:
    step: int
    epoch: int
    lr: float
    loss_s: float
    loss_m: float
    loss_total: float
    nn_cos_mean: float
    wall_time: float

    def row(self) -> list[str]:
        # repr keeps full float precision so traces compare bit-for-bit
        return [str(self.step), str(self.epoch)] + [repr(getattr(self, f)) for f in TRACE_FIELDS[2:]]


def _param_groups(stack: NetworkStack, weight_decay: float, bn_decay: bool) -> list[dict]:
    bn_params = set()
    for m in stack.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            bn_params.update(id(p) for p in m.parameters())
    decay, no_decay = [], []
    for p in stack.parameters():
        (no_decay if id(p) in bn_params and not bn_decay else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


class Trainer:
    """Holds the three stacks, the support queue and the optimizer."""

    def __init__(self, run: RunConfig, in_channels: int = 3, dtype: torch.dtype = torch.float32):
        self.run = run
        cfg = run.train
        self.dtype = dtype
        self.online = build_online(run.model, generator(cfg.seed, "init"), in_channels, dtype)
        self.momentum = follower(self.online, Role.MOMENTUM)
        self.stopgrad = follower(self.online, Role.TIED_STOP_GRAD)
        self.queue = init_random(cfg.queue_capacity, run.model.proj_dim, substream(cfg.seed, "queue"), dtype)
        self.optimizer = torch.optim.SGD(
            _param_groups(self.online, cfg.weight_decay, cfg.bn_weight_decay),
            lr=cfg.lr, momentum=cfg.opt_momentum)
        self.step = 0
        for stack in (self.online, self.momentum, self.stopgrad):
            stack.train()

    # -- the step ---------------------------------------------------------

    def compute_loss(self, views, pick: int | None = None) -> tuple[LossReport, dict]:
        """Forward all branches and return the loss report plus the gradient-free targets."""
        x1, x2, x3 = (v.to(self.dtype) for v in views)
        k = self.run.train.combine_k
        _, p1 = forward_backprop(self.online, x1)
        _, p2 = forward_backprop(self.online, x2)
        _, p3 = forward_backprop(self.online, x3)
        z1 = forward_momentum(self.momentum, x1)
        z2 = forward_momentum(self.momentum, x2)
        z1n, z2n = nn_lookup(self.queue, z1), nn_lookup(self.queue, z2)
        c1 = local_branch(x1, self.stopgrad, k, pick)
        c3 = local_branch(x3, self.stopgrad, k, pick)
        report = total_loss(c1, c3, z1n, z2n, p1, p2, p3, self.run.loss)
        targets = dict(z1=z1, z2=z2, z1n=z1n, z2n=z2n, c1=c1, c3=c3)
        return report, targets

    def total_steps(self, steps_per_epoch: int) -> int:
        return self.run.train.epochs * steps_per_epoch

    def train_step(self, batch: ImageBatch, total_steps: int, epoch: int = 0) -> StepTrace:
        start = time.perf_counter()
        cfg = self.run.train
        views = [v.images for v in make_triple(batch, self.run.augment, substream(cfg.seed, "augment", self.step))]
        pick = None
        if cfg.single_embedding:
            s = combination_count(cfg.combine_k)
            pick = int(torch.randint(0, s, (), generator=generator(cfg.seed, "pick", self.step)))

        report, targets = self.compute_loss(views, pick)
        if not torch.isfinite(report.loss_total):
            raise NumericalError(self._diagnose(report, targets))

        lr = cosine_lr(self.step, total_steps, cfg.lr, cfg.lr_final)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        report.loss_total.backward()
        self.optimizer.step()
        momentum_update(self.momentum, self.online, cfg.ema_m)
        tie_weights(self.stopgrad, self.online)
        enqueue(self.queue, targets["z1"])

        with torch.no_grad():
            cos = torch.cat([
                (F.normalize(targets["z1"], dim=1) * targets["z1n"]).sum(1),
                (F.normalize(targets["z2"], dim=1) * targets["z2n"]).sum(1),
            ]).mean()
        trace = StepTrace(self.step, epoch, lr, report.loss_s.item(), report.loss_m.item(),
                          report.loss_total.item(), cos.item(), time.perf_counter() - start)
        self.step += 1
        return trace

    def _diagnose(self, report: LossReport, targets: dict) -> str:
        parts = [f"non-finite loss at step {self.step}: loss_s={report.loss_s.item()} "
                 f"loss_m={report.loss_m.item()}"]
        for name, t in targets.items():
            t = t.detach()
            parts.append(f"{name}: finite={bool(torch.isfinite(t).all())} min={float(t.min()):.4g} "
                         f"max={float(t.max()):.4g} norm_mean={float(t.norm(dim=1).mean()):.4g}")
        return "\n".join(parts)

    # -- persistence ------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for role, stack in (("online", self.online), ("momentum", self.momentum), ("stopgrad", self.stopgrad)):
            for k, v in stack.state_dict().items():
                out[f"{role}.{k}"] = v
        for k, v in self.queue.state().items():
            out[f"queue.{k}"] = v
        names = {id(p): n for n, p in self.online.named_parameters()}
        for p, st in self.optimizer.state.items():
            if st.get("momentum_buffer") is not None:
                out[f"optim.{names[id(p)]}.momentum_buffer"] = st["momentum_buffer"]
        return out

    def save(self, path, epoch: int) -> Path:
        return checkpoint.save(path, self.state_tensors(), to_ini(self.run),
                               {"step": self.step, "epoch": epoch})

    @classmethod
    def restore(cls, path, in_channels: int | None = None) -> tuple["Trainer", dict]:
        tensors, config_text, meta = checkpoint.load(path)
        run = from_ini(config_text)
        if in_channels is None:
            in_channels = _stem_channels(tensors)
        dtype = tensors["queue.storage"].dtype
        trainer = cls(run, in_channels, dtype)
        trainer.load_tensors(tensors)
        trainer.step = int(meta.get("step", 0))
        return trainer, meta

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        checkpoint.load_into(self.online, tensors, "online.")
        checkpoint.load_into(self.momentum, tensors, "momentum.")
        checkpoint.load_into(self.stopgrad, tensors, "stopgrad.")
        self.queue = SupportQueue.from_state({k: tensors[f"queue.{k}"] for k in ("storage", "slot_batch", "cursor")})
        params = dict(self.online.named_parameters())
        for key, v in tensors.items():
            if key.startswith("optim."):
                name = key[len("optim."):-len(".momentum_buffer")]
                self.optimizer.state[params[name]]["momentum_buffer"] = v.clone()


def _stem_channels(tensors: dict[str, torch.Tensor]) -> int:
    for k, v in tensors.items():
        if k.startswith("online.backbone.") and v.ndim == 4:
            return v.shape[1]
    raise checkpoint.CheckpointError("no convolution weights under online.backbone")


def load_online(path) -> tuple[NetworkStack, RunConfig]:
    """The online stack of a checkpoint, for evaluation."""
    tensors, config_text, _ = checkpoint.load(path)
    run = from_ini(config_text)
    dtype = tensors["queue.storage"].dtype
    stack = build_online(run.model, generator(run.train.seed, "init"), _stem_channels(tensors), dtype)
    checkpoint.load_into(stack, tensors, "online.")
    return stack, run


def with_dataset_stats(run: RunConfig, dataset: Dataset) -> RunConfig:
    """Fill in normalization constants and output size from the training set when unset."""
    aug = run.augment
    changes = {}
    if aug.mean is None:
        mean, std = channel_stats(dataset)
        changes.update(mean=tuple(mean), std=tuple(std))
    if len(dataset) and tuple(dataset.shape[1:]) != tuple(aug.output_hw):
        # views are produced at the dataset's native size
        hw = tuple(dataset.shape[1:])
        k = AugmentPolicy.for_size(hw).blur_kernel
        changes.update(output_hw=hw, blur_kernel=k)
    if changes:
        run = dataclasses.replace(run, augment=dataclasses.replace(aug, **changes))
    return run


@dataclass
class FitResult:
    checkpoint: Path
    trace: Path
    milestones: dict[int, Path]


def fit(dataset: Dataset, run: RunConfig, out_dir, resume=None, milestones=(),
        dtype: torch.dtype = torch.float32) -> FitResult:
    """Pretrain for ``run.train.epochs`` epochs of ``len(dataset) // batch_size`` steps.

    Writes ``trace.csv`` (deterministic columns), ``timing.csv`` (wall time
    per step), periodic ``epoch_XXXX.ckpt`` files and ``final.ckpt``.
    ``resume`` continues from a checkpoint written by an earlier call.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer, _ = Trainer.restore(resume, dataset.images.shape[1])
        run = trainer.run
    else:
        run = with_dataset_stats(run, dataset)
        trainer = Trainer(run, dataset.images.shape[1], dtype)
    cfg = run.train
    spe = len(dataset) // cfg.batch_size
    total = trainer.total_steps(spe)
    trace_path, timing_path = out_dir / "trace.csv", out_dir / "timing.csv"
    mode = "a" if resume is not None and trace_path.exists() else "w"
    saved: dict[int, Path] = {}
    marks = set(milestones)

    def save(name: str, epoch: int) -> Path:
        return trainer.save(out_dir / name, epoch)

    start_epoch = trainer.step // spe if spe else 0
    with open(trace_path, mode, newline="") as tf, open(timing_path, mode, newline="") as wf:
        trace_w, timing_w = csv.writer(tf), csv.writer(wf)
        if mode == "w":
            trace_w.writerow(TRACE_FIELDS)
            timing_w.writerow(("step", "wall_time"))
        if 0 in marks and resume is None:
            saved[0] = save("epoch_0000.ckpt", 0)
        for epoch in range(start_epoch, cfg.epochs):
            skip = trainer.step - epoch * spe
            epoch_batches = batches(dataset, cfg.batch_size, cfg.seed, epoch, drop_last=True)[skip:]
            for batch in prefetch(epoch_batches, cfg.prefetch):
                trace = trainer.train_step(batch, total, epoch)
                trace_w.writerow(trace.row())
                timing_w.writerow((trace.step, f"{trace.wall_time:.6f}"))
            tf.flush()
            wf.flush()
            done = epoch + 1
            log.info("epoch %d/%d done (step %d)", done, cfg.epochs, trainer.step)
            if done in marks:
                saved[done] = save(f"epoch_{done:04d}.ckpt", done)
            elif cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                save(f"epoch_{done:04d}.ckpt", done)
    final = save("final.ckpt", cfg.epochs)
    return FitResult(final, trace_path, saved)
