"""Linear probe on frozen backbone features."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import Optimizer

from .augment import AugmentPolicy, crop_flip_view, plain_view
from .config import EvalConfig
from .data import Dataset, ImageBatch
from .nets import NetworkStack, NumericalError, bn_mode
from .seeding import generator, substream
from .trainer import cosine_lr, load_online


class EvalError(ValueError):
    pass


@torch.no_grad()
def lars_step(params, grads, buffers, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
              trust_coeff: float = 0.001, eps: float = 1e-8, adapt: bool = True) -> None:
    """In-place LARS update of each tensor in ``params``.

    Per tensor: d = g + wd*w, scaled by trust_coeff*|w|/(|d| + eps) (by 1
    when either norm is zero or ``adapt`` is off), then buf <- momentum*buf + d
    and w <- w - lr*buf.
    """
    for w, g, buf in zip(params, grads, buffers):
        if g is None:
            continue
        d = g.add(w, alpha=weight_decay) if weight_decay else g.clone()
        w_norm, d_norm = float(w.norm()), float(d.norm())
        if not (math.isfinite(w_norm) and math.isfinite(d_norm)):
            raise NumericalError(f"non-finite norm in LARS step (|w|={w_norm}, |d|={d_norm})")
        if adapt and w_norm > 0 and d_norm > 0:
            d.mul_(trust_coeff * w_norm / (d_norm + eps))
        buf.mul_(momentum).add_(d)
        w.sub_(buf, alpha=lr)


class LARS(Optimizer):
    """LARS; parameter groups with ``adapt=False`` skip the trust scaling (plain momentum SGD)."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 trust_coeff: float = 0.001, eps: float = 1e-8, adapt: bool = True):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      trust_coeff=trust_coeff, eps=eps, adapt=adapt))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            ps = [p for p in group["params"] if p.grad is not None]
            bufs = []
            for p in ps:
                st = self.state[p]
                if "momentum_buffer" not in st:
                    st["momentum_buffer"] = torch.zeros_like(p)
                bufs.append(st["momentum_buffer"])
            lars_step(ps, [p.grad for p in ps], bufs, group["lr"], group["momentum"],
                      group["weight_decay"], group["trust_coeff"], group["eps"], group["adapt"])


@torch.no_grad()
def extract_features(stack: NetworkStack, images: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Backbone features of already-standardized images, batch-norm on running stats."""
    dtype = next(stack.parameters()).dtype
    with bn_mode(stack, False):
        return torch.cat([stack.backbone(images[i:i + batch_size].to(dtype))
                          for i in range(0, len(images), batch_size)])


def dataset_features(stack: NetworkStack, dataset: Dataset, policy: AugmentPolicy) -> torch.Tensor:
    x = plain_view(ImageBatch(dataset.images, dataset.labels, torch.arange(len(dataset))), policy)
    return extract_features(stack, x)


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, ks=(1, 5)) -> dict[str, float]:
    out = {}
    for k in ks:
        kk = min(k, logits.shape[1])
        hit = (logits.topk(kk, dim=1).indices == labels[:, None]).any(dim=1)
        out[f"top{k}"] = float(hit.to(torch.float64).mean()) if len(labels) else 0.0
    return out


def train_probe(features: Callable[[int], torch.Tensor], labels: torch.Tensor, class_count: int,
                cfg: EvalConfig) -> nn.Linear:
    """Fit a zero-initialized linear layer; ``features(epoch)`` supplies the train features."""
    first = features(0)
    probe = nn.Linear(first.shape[1], class_count).to(first.dtype)
    nn.init.zeros_(probe.weight)
    nn.init.zeros_(probe.bias)
    opt = LARS(probe.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
               trust_coeff=cfg.trust_coeff, eps=cfg.lars_eps, adapt=cfg.adapt_probe)
    n = len(labels)
    spe = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * spe
    step = 0
    for epoch in range(cfg.epochs):
        feats = first if epoch == 0 else features(epoch)
        order = torch.randperm(n, generator=generator(cfg.seed, "probe-shuffle", epoch))
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_final)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = F.cross_entropy(probe(feats[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
    return probe


def evaluate_stack(stack: NetworkStack, policy: AugmentPolicy, train_set: Dataset, test_set: Dataset,
                   cfg: EvalConfig) -> dict[str, float]:
    if train_set.class_count != test_set.class_count:
        raise EvalError(f"train has {train_set.class_count} classes, test has {test_set.class_count}")
    if train_set.shape != test_set.shape:
        raise EvalError(f"train images {train_set.shape} vs test images {test_set.shape}")
    all_idx = torch.arange(len(train_set))
    batch = ImageBatch(train_set.images, train_set.labels, all_idx)

    def train_features(epoch: int) -> torch.Tensor:
        if not cfg.augment_train:
            return plain_train
        return extract_features(stack, crop_flip_view(batch, policy, cfg.crop_padding,
                                                      substream(cfg.seed, "probe-augment", epoch)))

    plain_train = dataset_features(stack, train_set, policy) if not cfg.augment_train else None
    probe = train_probe(train_features, train_set.labels, train_set.class_count, cfg)
    with torch.no_grad():
        test_logits = probe(dataset_features(stack, test_set, policy))
        train_logits = probe(dataset_features(stack, train_set, policy))
    result = topk_accuracy(test_logits, test_set.labels)
    result["train_top1"] = topk_accuracy(train_logits, train_set.labels, (1,))["top1"]
    return result


def param_digest(stack: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in stack.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def evaluate(checkpoint_path, train_set: Dataset, test_set: Dataset, cfg: EvalConfig | None = None) -> dict:
    """Top-1/top-5 of a linear probe on the checkpoint's frozen online backbone."""
    stack, run = load_online(checkpoint_path)
    cfg = cfg or run.eval
    stack.requires_grad_(False)
    before = param_digest(stack)
    result = evaluate_stack(stack, run.augment, train_set, test_set, cfg)
    if param_digest(stack) != before:
        raise EvalError("backbone changed during evaluation")
    return result
