"""Contrastive objective.

The classic InfoNCE term for one anchor z_i,

    -log exp(z_i.z_i+ / tau) / (exp(z_i.z_i+ / tau) + sum_b exp(z_i.z_b- / tau)),

is computed here with in-batch negatives: for a target block ``h`` and
predictions ``p`` (both N rows, L2-normalized), row i of ``h p^T / tau`` is a
logit vector whose diagonal entry is the positive and whose other N-1 entries
play the role of the negatives z_b-. No separate negative set is used; the
support queue only supplies positives.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

NORM_EPS = 1e-12


class LossShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0
    lam: float = 6.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass
class LossReport:
    loss_s: torch.Tensor
    loss_m: torch.Tensor
    loss_total: torch.Tensor
    per_split: list[float] = field(default_factory=list)


def split_losses(h: torch.Tensor, p: torch.Tensor, temperature: float) -> torch.Tensor:
    """Cross-entropy of every N-row block of ``h`` against ``p``; shape (s,)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if h.ndim != 2 or p.ndim != 2 or h.shape[1] != p.shape[1]:
        raise LossShapeError(f"incompatible shapes {tuple(h.shape)} and {tuple(p.shape)}")
    n = p.shape[0]
    if n == 0 or h.shape[0] % n:
        raise LossShapeError(f"{h.shape[0]} target rows is not a multiple of {n} prediction rows")
    h = F.normalize(h, dim=1, eps=NORM_EPS)
    p = F.normalize(p, dim=1, eps=NORM_EPS)
    labels = torch.arange(n)
    # cross_entropy subtracts the row max before exponentiating
    return torch.stack([F.cross_entropy(block @ p.T / temperature, labels) for block in h.split(n)])


def contrastive_L(h: torch.Tensor, p: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Mean over the s = rows(h)/rows(p) blocks of the in-batch contrastive loss."""
    return split_losses(h, p, temperature).mean()


def total_loss(c1: torch.Tensor, c3: torch.Tensor, z1n: torch.Tensor, z2n: torch.Tensor,
               p1: torch.Tensor, p2: torch.Tensor, p3: torch.Tensor, cfg: LossConfig,
               lam: float | None = None) -> LossReport:
    """loss_s + lambda * loss_m.

    ``lam`` overrides ``cfg.lam`` without the positivity check (used to probe
    the lambda -> 0 limit).
    """
    lam = cfg.lam if lam is None else lam
    t = cfg.temperature
    s13, s31 = split_losses(c1, p3, t), split_losses(c3, p1, t)
    loss_s = (s13.mean() + s31.mean()) / 2
    loss_m = (contrastive_L(z1n, p2, t) + contrastive_L(z2n, p1, t)) / 2
    per_split = torch.cat([s13, s31]).detach().tolist()
    return LossReport(loss_s, loss_m, loss_s + lam * loss_m, per_split)
