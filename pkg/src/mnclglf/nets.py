"""Encoder stacks and the three parameter roles.

A ``NetworkStack`` is backbone -> projector (-> predictor). The online stack
(role ``BACKPROP``) is the only one an optimizer touches. The momentum stack
trails it by exponential moving average; the stop-gradient stack is a
value-identical copy that is re-tied after every optimizer step. Both
follower stacks have ``requires_grad=False`` on every parameter, so no
gradient can reach them or flow back through them.
"""
from __future__ import annotations

import contextlib
import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import torch
import torch.nn as nn
import torchvision


class Role(enum.Enum):
    BACKPROP = "backprop"
    MOMENTUM = "momentum"
    TIED_STOP_GRAD = "stopgrad"


class StructureError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet18-cifar"
    toy_widths: tuple[int, ...] = (32, 64, 128, 256)
    proj_hidden: int = 2048
    proj_dim: int = 2048
    pred_hidden: int = 512

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        kw = dict(backbone="toy-cnn", toy_widths=(32, 64, 128, 256),
                  proj_hidden=512, proj_dim=512, pred_hidden=128)
        kw.update(overrides)
        return cls(**kw)


class ToyConvNet(nn.Module):
    """Four conv-BN-ReLU stages, stride 2 after the first, global average pool."""

    def __init__(self, widths=(32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        layers = []
        c = in_channels
        for i, w in enumerate(widths):
            layers += [
                nn.Conv2d(c, w, 3, stride=1 if i == 0 else 2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            c = w
        self.features = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


def resnet18_cifar(in_channels: int = 3) -> nn.Module:
    """torchvision ResNet-18 with a 3x3 stride-1 stem, no max-pool, and no classifier."""
    net = torchvision.models.resnet18(weights=None)
    net.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    net.fc = nn.Identity()
    net.out_dim = 512
    return net


def build_backbone(cfg: ModelConfig, in_channels: int = 3) -> nn.Module:
    if cfg.backbone == "resnet18-cifar":
        return resnet18_cifar(in_channels)
    if cfg.backbone == "toy-cnn":
        return ToyConvNet(cfg.toy_widths, in_channels)
    raise ValueError(f"unknown backbone {cfg.backbone!r}")


def projector(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    # no ReLU after the last BN
    return nn.Sequential(
        nn.Linear(in_dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim, bias=False), nn.BatchNorm1d(out_dim),
    )


def predictor(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        nn.Linear(hidden, dim),
    )


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Kaiming-uniform conv/linear weights, zero biases, BN gamma=1 beta=0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator, dtype=m.weight.dtype)
                               .mul_(2 * bound).sub_(bound))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
            m.reset_running_stats()


class NetworkStack(nn.Module):
    def __init__(self, backbone: nn.Module, proj: nn.Module, pred: nn.Module | None, role: Role):
        super().__init__()
        self.backbone = backbone
        self.projector = proj
        self.predictor = pred
        self.role = role
        if (pred is not None) != (role is Role.BACKPROP):
            raise StructureError(f"role {role.value} {'needs' if pred is None else 'cannot have'} a predictor")

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_dim

    @property
    def embed_dim(self) -> int:
        return self.projector[-1].num_features

    def forward(self, x):
        z = self.projector(self.backbone(x))
        if self.predictor is None:
            return z
        return z, self.predictor(z)

    def shared_named_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """Backbone and projector parameters, the part all three roles share."""
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("predictor.")]

    def shared_named_buffers(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, b) for n, b in self.named_buffers() if not n.startswith("predictor.")]

    def snapshot(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, p.detach().clone()) for n, p in self.named_parameters()]


def build_online(cfg: ModelConfig, generator: torch.Generator, in_channels: int = 3,
                 dtype: torch.dtype = torch.float32) -> NetworkStack:
    backbone = build_backbone(cfg, in_channels)
    stack = NetworkStack(
        backbone,
        projector(backbone.out_dim, cfg.proj_hidden, cfg.proj_dim),
        predictor(cfg.proj_dim, cfg.pred_hidden),
        Role.BACKPROP,
    )
    stack.to(dtype)
    init_weights(stack, generator)
    return stack


def follower(online: NetworkStack, role: Role) -> NetworkStack:
    """A gradient-free copy of ``online``'s backbone and projector."""
    if role is Role.BACKPROP:
        raise ValueError("followers are momentum or stop-gradient stacks")
    stack = NetworkStack(copy.deepcopy(online.backbone), copy.deepcopy(online.projector), None, role)
    stack.requires_grad_(False)
    return stack


def _pairs(dst: NetworkStack, src: NetworkStack, kind: str) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    if kind == "param":
        a, b = dst.shared_named_parameters(), src.shared_named_parameters()
    else:
        a, b = dst.shared_named_buffers(), src.shared_named_buffers()
    for i in range(max(len(a), len(b))):
        if i >= len(a) or i >= len(b):
            name = (a[i] if i < len(a) else b[i])[0]
            raise StructureError(f"{kind} {name!r} exists in only one stack")
        (na, ta), (nb, tb) = a[i], b[i]
        if na != nb or ta.shape != tb.shape or ta.dtype != tb.dtype:
            raise StructureError(
                f"first divergent {kind}: {na!r} {tuple(ta.shape)} {ta.dtype} vs {nb!r} {tuple(tb.shape)} {tb.dtype}")
        yield ta, tb


def check_structure(a: NetworkStack, b: NetworkStack) -> None:
    for kind in ("param", "buffer"):
        for _ in _pairs(a, b, kind):
            pass


@torch.no_grad()
def momentum_update(momentum: NetworkStack, online: NetworkStack, m: float) -> None:
    """theta_m <- m * theta_m + (1 - m) * theta_o over backbone+projector.

    Batch-norm running statistics follow the same average; the batch counter
    is copied.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {m}")
    if momentum.role is not Role.MOMENTUM:
        raise StructureError(f"expected a momentum stack, got role {momentum.role.value}")
    check_structure(momentum, online)
    for tm, to in _pairs(momentum, online, "param"):
        if m == 0.0:
            tm.copy_(to)
        else:
            tm.mul_(m).add_(to, alpha=1.0 - m)
    for bm, bo in _pairs(momentum, online, "buffer"):
        if bm.is_floating_point() and m != 0.0:
            bm.mul_(m).add_(bo, alpha=1.0 - m)
        else:
            bm.copy_(bo)


@torch.no_grad()
def tie_weights(stopgrad: NetworkStack, online: NetworkStack) -> None:
    """Copy the online backbone+projector parameter values into the stop-gradient stack."""
    if stopgrad.role is not Role.TIED_STOP_GRAD:
        raise StructureError(f"expected a stop-gradient stack, got role {stopgrad.role.value}")
    check_structure(stopgrad, online)
    for ts, to in _pairs(stopgrad, online, "param"):
        ts.copy_(to)


def copy_from(dst: NetworkStack, src: NetworkStack) -> None:
    """Copy parameters and buffers (used to start the momentum stack at the online values)."""
    check_structure(dst, src)
    with torch.no_grad():
        for a, b in _pairs(dst, src, "param"):
            a.copy_(b)
        for a, b in _pairs(dst, src, "buffer"):
            a.copy_(b)


def max_param_gap(a: NetworkStack, b: NetworkStack) -> float:
    gap = 0.0
    for ta, tb in _pairs(a, b, "param"):
        gap = max(gap, float((ta.detach() - tb.detach()).abs().max()))
    return gap


@contextlib.contextmanager
def bn_mode(module: nn.Module, train: bool):
    """Temporarily switch train/eval mode, restoring each submodule's flag afterwards."""
    saved = [(m, m.training) for m in module.modules()]
    module.train(train)
    try:
        yield module
    finally:
        for m, flag in saved:
            m.training = flag


def _check_input(stack: NetworkStack, view: torch.Tensor) -> None:
    if view.ndim != 4:
        raise StructureError(f"expected an N x C x H x W view, got shape {tuple(view.shape)}")
    first = next(m for m in stack.backbone.modules() if isinstance(m, nn.Conv2d))
    if view.shape[1] != first.in_channels:
        raise StructureError(
            f"backbone stem expects {first.in_channels} channels, view has {view.shape[1]}")


def forward_backprop(stack: NetworkStack, view: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(z, p) for the online stack; both carry gradients to its parameters."""
    if stack.role is not Role.BACKPROP:
        raise StructureError(f"forward_backprop needs the backprop stack, got {stack.role.value}")
    _check_input(stack, view)
    return stack(view)


def forward_momentum(stack: NetworkStack, view: torch.Tensor) -> torch.Tensor:
    """Gradient-free embedding. A single-row batch runs batch-norm on running stats."""
    if stack.role is not Role.MOMENTUM:
        raise StructureError(f"forward_momentum needs the momentum stack, got {stack.role.value}")
    _check_input(stack, view)
    with torch.no_grad():
        if len(view) == 1:
            with bn_mode(stack, False):
                return stack(view)
        return stack(view)


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    worst: str = ""
    entries: list[tuple[str, int, float, float]] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(params: list[tuple[str, torch.Tensor]], loss_fn: Callable[[], torch.Tensor],
               eps: float = 1e-6, samples_per_tensor: int | None = 4, seed: int = 0,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd against central differences on sampled parameter entries.

    ``loss_fn`` is re-evaluated from scratch for every probe and must be a
    deterministic function of ``params``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``samples_per_tensor=None`` checks
    every entry.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    tensors = [p for _, p in params]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericalError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    g = torch.Generator().manual_seed(seed)
    report = GradCheckReport(0.0, 0.0, 0)
    for (name, p), grad in zip(params, grads):
        flat = p.data.view(-1)
        n = flat.numel()
        if samples_per_tensor is None or samples_per_tensor >= n:
            picks = range(n)
        else:
            picks = torch.randperm(n, generator=g)[:samples_per_tensor].tolist()
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite loss while probing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            analytic = 0.0 if grad is None else float(grad.reshape(-1)[i])
            abs_err = abs(analytic - numeric)
            rel = abs_err / max(abs(analytic), abs(numeric), floor)
            report.entries.append((name, i, analytic, numeric))
            report.checked += 1
            report.max_abs_err = max(report.max_abs_err, abs_err)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = f"{name}[{i}]"
    return report
