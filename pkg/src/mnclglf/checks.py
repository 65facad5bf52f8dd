"""Self-checks: reference-implementation comparisons and per-step training invariants.

Each check returns a :class:`CheckResult` carrying the worst error observed and
the tolerance it was held to. ``run_all`` is what ``mnclglf check`` prints.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass
from typing import Callable

import torch

from .augment import AugmentPolicy
from .config import RunConfig, TrainConfig
from .data import Dataset, batches
from .loss import LossConfig, contrastive_L
from .nets import ModelConfig, grad_check
from .patching import combination_count, combine
from .reference import infonce_termwise, nn_brute_force, ring_contents, sgd_momentum_trajectory
from .seeding import generator
from .support import SupportQueue, enqueue, nn_indices
from .trainer import Trainer, cosine_lr

# About 1.1k parameters: small enough to finite-difference every entry.
TINY_MODEL = ModelConfig(backbone="toy-cnn", toy_widths=(4, 6, 8), proj_hidden=8, proj_dim=8, pred_hidden=4)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self, status: bool = True) -> str:
        head = ("PASS  " if self.passed else "FAIL  ") if status else ""
        return (f"{head}{self.name:<22} max_err={self.max_error:.3e}  tol={self.tolerance:.1e}  "
                f"{self.seconds:6.1f}s  {self.detail}")


def tiny_run(seed: int = 0, batch_size: int = 8, queue_capacity: int = 20, combine_k: int = 2,
             lam: float = 6.0, hw: int = 8, epochs: int = 1, **train) -> RunConfig:
    policy = AugmentPolicy.for_size((hw, hw), mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
    return RunConfig(
        train=TrainConfig(epochs=epochs, batch_size=batch_size, queue_capacity=queue_capacity,
                          combine_k=combine_k, seed=seed, **train),
        model=TINY_MODEL,
        augment=policy,
        loss=LossConfig(lam=lam),
    )


def noise_dataset(n: int, hw: int = 8, classes: int = 4, seed: int = 0) -> Dataset:
    g = generator(seed, "noise-dataset")
    images = torch.randint(0, 256, (n, 3, hw, hw), generator=g, dtype=torch.uint8)
    labels = torch.randint(0, classes, (n,), generator=g)
    return Dataset(images, labels, classes)


def _timed(fn: Callable[[], CheckResult]) -> CheckResult:
    start = time.perf_counter()
    result = fn()
    result.seconds = time.perf_counter() - start
    return result


# -- loss ------------------------------------------------------------------

def check_loss_reference(configs: int = 120, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    g = generator(seed, "check-loss")
    worst = 0.0
    for i in range(configs):
        s = (1, 4, 6)[i % 3]
        n = int(torch.randint(1, 17, (), generator=g))
        d = int(torch.randint(1, 65, (), generator=g))
        tau = float(torch.empty(()).uniform_(0.05, 2.0, generator=g)) if i % 2 else 1.0
        h = torch.randn(s * n, d, generator=g, dtype=torch.float64)
        p = torch.randn(n, d, generator=g, dtype=torch.float64)
        got = float(contrastive_L(h, p, tau))
        worst = max(worst, abs(got - infonce_termwise(h.tolist(), p.tolist(), tau)))
    return CheckResult("loss vs reference", worst <= tol, worst, tol, f"{configs} configurations")


# -- nearest neighbour -----------------------------------------------------

def _dyadic_units(count: int, dim: int, g: torch.Generator) -> torch.Tensor:
    """Unit rows with four entries of +-1/2; their cosines are exact in floating point."""
    rows = torch.zeros(count, dim, dtype=torch.float64)
    for r in range(count):
        cols = torch.randperm(dim, generator=g)[:4]
        signs = torch.randint(0, 2, (4,), generator=g) * 2 - 1
        rows[r, cols] = 0.5 * signs.to(torch.float64)
    return rows


def check_nn_reference(trials: int = 1000, seed: int = 0) -> CheckResult:
    """Exact index agreement; every other trial is built from exactly tied rows."""
    g = generator(seed, "check-nn")
    mismatches, ties = 0, 0
    for t in range(trials):
        cap = int(torch.randint(1, 257, (), generator=g))
        nq = int(torch.randint(1, 9, (), generator=g))
        if t % 2:
            dim = int(torch.randint(4, 9, (), generator=g))
            distinct = _dyadic_units(max(1, cap // 4), dim, g)
            rows = distinct[torch.randint(0, len(distinct), (cap,), generator=g)]
            # power-of-two rescaling keeps normalized rows bit-identical
            rows = rows * (2.0 ** torch.randint(-3, 4, (cap, 1), generator=g)).to(torch.float64)
            queries = _dyadic_units(nq, dim, g)
        else:
            dim = int(torch.randint(1, 33, (), generator=g))
            rows = torch.randn(cap, dim, generator=g, dtype=torch.float64)
            queries = torch.randn(nq, dim, generator=g, dtype=torch.float64)
        got = nn_indices(SupportQueue(rows), queries).tolist()
        want = nn_brute_force(rows.tolist(), queries.tolist())
        mismatches += sum(a != b for a, b in zip(got, want))
        if t % 2:
            sims = torch.nn.functional.normalize(queries, dim=1) @ torch.nn.functional.normalize(rows, dim=1).T
            ties += int((sims == sims.max(dim=1, keepdim=True).values).sum(1).gt(1).sum())
    return CheckResult("nn vs brute force", mismatches == 0, float(mismatches), 0.0,
                       f"{trials} trials, {ties} tied queries")


# -- gradients -------------------------------------------------------------

def full_loss_closure(seed: int = 0, batch_size: int = 4, lam: float = 6.0, combine_k: int = 2):
    """A float64 trainer and a closure recomputing every branch of the total loss from scratch.

    The queue is first filled with momentum embeddings so the lookup returns
    real neighbours. Perturbing online parameters leaves the momentum and
    stop-gradient stacks untouched, exactly as in a training step.
    """
    from .augment import make_triple

    run = tiny_run(seed, batch_size=batch_size, queue_capacity=3 * batch_size, lam=lam, combine_k=combine_k)
    trainer = Trainer(run, 3, torch.float64)
    ds = noise_dataset(4 * batch_size, seed=seed)
    for b in batches(ds, batch_size, seed)[:3]:
        trainer.train_step(b, total_steps=100)
    batch = batches(ds, batch_size, seed, epoch=1)[0]
    views = [v.images.to(torch.float64) for v in make_triple(batch, run.augment, seed)]

    def loss_fn():
        return trainer.compute_loss(views)[0].loss_total

    return trainer, loss_fn


# Some entries have an exactly zero gradient (the last projector batch-norm
# shift is cancelled by the predictor's batch-norm). Their central difference
# is rounding noise of order |L| * 1e-16 / eps, so errors are measured
# relative to max(|a|, |n|, GRAD_FLOOR).
GRAD_EPS = 1e-5
GRAD_FLOOR = 1e-5


def check_gradients(seed: int = 0, tol: float = 1e-4, eps: float = GRAD_EPS,
                    floor: float = GRAD_FLOOR) -> CheckResult:
    trainer, loss_fn = full_loss_closure(seed)
    params = list(trainer.online.named_parameters())
    report = grad_check(params, loss_fn, eps=eps, samples_per_tensor=None, seed=seed, floor=floor)
    n = sum(p.numel() for _, p in params)
    rel = [abs(a - b) / max(abs(a), abs(b)) for _, _, a, b in report.entries if max(abs(a), abs(b)) >= floor]
    below = report.checked - len(rel)
    return CheckResult("gradient vs finite diff", report.passed(tol), report.max_rel_err, tol,
                       f"{report.checked}/{n} entries, worst {report.worst}; pure relative "
                       f"{max(rel, default=0.0):.1e} over {len(rel)}, abs {report.max_abs_err:.1e}, "
                       f"{below} below {floor:g}")


# -- combinations ----------------------------------------------------------

def check_combinations(seed: int = 0, tol: float = 1e-6) -> CheckResult:
    counts = {k: combination_count(k) for k in (1, 2, 3, 4)}
    ok = counts == {k: math.comb(4, k) for k in counts} == {1: 4, 2: 6, 3: 4, 4: 1}
    g = generator(seed, "check-combine")
    worst = 0.0
    for _ in range(50):
        n = int(torch.randint(1, 9, (), generator=g))
        enc = torch.randn(4 * n, 16, generator=g)
        for k in (1, 2, 3, 4):
            cset = combine(enc, k)
            ok &= cset.s == counts[k] and cset.combined.shape == (counts[k] * n, 16)
            # every quadrant appears in C(3, k-1) of the C(4, k) subsets
            avg = sum(cset.block(j) for j in range(cset.s)) / cset.s
            worst = max(worst, float((avg - enc.view(4, n, 16).mean(0)).abs().max()))
    return CheckResult("combination arithmetic", ok and worst <= tol, worst, tol, f"s={list(counts.values())}")


# -- ring buffer -----------------------------------------------------------

def check_ring_buffer(trials: int = 200, seed: int = 0) -> CheckResult:
    g = generator(seed, "check-ring")
    failures = 0
    for _ in range(trials):
        cap = int(torch.randint(1, 41, (), generator=g))
        bs = int(torch.randint(1, cap + 1, (), generator=g))
        n_batches = int(torch.randint(1, 15, (), generator=g))
        q = SupportQueue(torch.zeros(cap, 1, dtype=torch.float64))
        seq = [[float(t * 1000 + i) for i in range(bs)] for t in range(n_batches)]
        w = math.ceil(cap / bs)
        for t, b in enumerate(seq):
            enqueue(q, torch.tensor(b, dtype=torch.float64).view(-1, 1))
            failures += q.storage.view(-1).tolist() != ring_contents(cap, seq[:t + 1], [0.0] * cap)
            failures += sum(bool((q.slot_batch == u).any()) != (t - u < w) for u in range(t + 1))
    return CheckResult("ring buffer", failures == 0, float(failures), 0.0, f"{trials} simulations")


# -- schedule and optimizer ------------------------------------------------

def check_schedule(tol: float = 1e-12) -> CheckResult:
    ends = (cosine_lr(0, 1000, 0.1, 0.0), cosine_lr(1000, 1000, 0.1, 0.0))
    mid = cosine_lr(500, 1000, 0.1, 0.0)
    err = abs(mid - 0.05)
    ok = ends == (0.1, 0.0) and err <= tol
    return CheckResult("cosine schedule", ok, err, tol, f"start={ends[0]} end={ends[1]} mid={mid!r}")


def check_sgd(tol: float = 1e-12) -> CheckResult:
    """torch SGD with coupled weight decay on f(w) = (w - 3)^2 against the hand recursion."""
    w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = torch.optim.SGD([w], lr=0.1, momentum=0.9, weight_decay=1e-2)
    lrs = [cosine_lr(i, 10, 0.1) for i in range(10)]
    got = []
    for lr in lrs:
        opt.param_groups[0]["lr"] = lr
        opt.zero_grad()
        ((w - 3.0) ** 2).sum().backward()
        opt.step()
        got.append(w.item())
    want = sgd_momentum_trajectory(1.0, lambda t: 2 * (t - 3.0), lrs, 0.9, 1e-2)
    err = max(abs(a - b) for a, b in zip(got, want))
    return CheckResult("sgd momentum step", err <= tol, err, tol, "10 steps")


# -- training invariants ---------------------------------------------------

@dataclass
class InvariantReport:
    steps: int = 0
    tie_violations: int = 0
    ema_max_error: float = 0.0
    ema_off_segment: int = 0
    fifo_violations: int = 0
    loss_sum_max_error: float = 0.0
    finite: bool = True
    first_failure: str = ""

    def ok(self, ema_tol: float = 1e-12, loss_tol: float = 1e-6) -> bool:
        return (self.finite and not self.tie_violations and not self.ema_off_segment
                and not self.fifo_violations and self.ema_max_error <= ema_tol
                and self.loss_sum_max_error <= loss_tol)

    def note(self, message: str) -> None:
        if not self.first_failure:
            self.first_failure = message


def training_invariants(steps: int = 200, seed: int = 0, batch_size: int = 8, queue_capacity: int = 20,
                        ema_override: float | None = None, dtype: torch.dtype = torch.float64) -> InvariantReport:
    """Train a tiny stack and check the structural invariants after every step.

    Expectations always use the configured EMA coefficient; ``ema_override``
    makes the trainer run with a different one (the negative control).
    """
    run = tiny_run(seed, batch_size=batch_size, queue_capacity=queue_capacity)
    trainer = Trainer(run, 3, dtype)
    if ema_override is not None:
        trainer.run = run.with_section("train", ema_m=ema_override)
    m, lam = run.train.ema_m, run.loss.lam
    ds = noise_dataset(5 * batch_size, seed=seed)
    spe = len(ds) // batch_size
    window = math.ceil(queue_capacity / batch_size)
    report = InvariantReport()
    epoch_batches: list = []
    for t in range(steps):
        epoch, within = divmod(t, spe)
        if within == 0:
            epoch_batches = batches(ds, batch_size, seed, epoch, drop_last=True)
        before = [p.detach().clone() for _, p in trainer.momentum.shared_named_parameters()]
        trace = trainer.train_step(epoch_batches[within], steps, epoch)
        report.steps += 1
        vals = (trace.loss_s, trace.loss_m, trace.loss_total)
        if not all(math.isfinite(v) for v in vals):
            report.finite = False
            report.note(f"step {t}: non-finite loss")
        err = abs(trace.loss_total - (trace.loss_s + lam * trace.loss_m))
        report.loss_sum_max_error = max(report.loss_sum_max_error, err)
        online = dict(trainer.online.shared_named_parameters())
        for name, ps in trainer.stopgrad.shared_named_parameters():
            if not torch.equal(ps, online[name]):
                report.tie_violations += 1
                report.note(f"step {t}: stop-gradient {name} differs from online")
        for (name, pm), old in zip(trainer.momentum.shared_named_parameters(), before):
            po = online[name].detach()
            want = m * old + (1 - m) * po
            scale = torch.maximum(old.abs(), po.abs()).clamp_min(1.0)
            e = float(((pm - want).abs() / scale).max())
            report.ema_max_error = max(report.ema_max_error, e)
            slack = 4 * torch.finfo(dtype).eps * scale
            lo, hi = torch.minimum(old, po) - slack, torch.maximum(old, po) + slack
            if not bool(((pm >= lo) & (pm <= hi)).all()):
                report.ema_off_segment += 1
                report.note(f"step {t}: momentum {name} left the EMA segment")
        sb = trainer.queue.slot_batch
        for u in range(max(0, t - window - 1), t + 1):
            if bool((sb == u).any()) != (t - u < window):
                report.fifo_violations += 1
                report.note(f"step {t}: batch {u} presence wrong (window {window})")
        if bool((sb < 0).any()) != ((t + 1) * batch_size < queue_capacity):
            report.fifo_violations += 1
            report.note(f"step {t}: initial rows present={bool((sb < 0).any())}")
        if int((sb == t).sum()) != batch_size:
            report.fifo_violations += 1
            report.note(f"step {t}: {int((sb == t).sum())} slots hold the newest batch")
    return report


def check_training_invariants(steps: int = 200, seed: int = 0, ema_override: float | None = None) -> CheckResult:
    rep = training_invariants(steps, seed, ema_override=ema_override)
    worst = max(rep.ema_max_error, rep.loss_sum_max_error)
    detail = (f"{rep.steps} steps, tie={rep.tie_violations} ema_off={rep.ema_off_segment} "
              f"fifo={rep.fifo_violations} {rep.first_failure}").rstrip()
    return CheckResult("training invariants", rep.ok(), worst, 1e-12, detail)


def check_ema_decay(m: float = 0.99, ema_override: float | None = None, tol: float = 1e-12) -> CheckResult:
    """Repeated updates toward a fixed online stack close the gap by exactly m per update."""
    from .nets import Role, build_online, follower, momentum_update

    online = build_online(TINY_MODEL, generator(0, "init"), 3, torch.float64)
    mom = follower(online, Role.MOMENTUM)
    with torch.no_grad():
        for p in mom.parameters():
            p.add_(1.0)
    gap0 = [(pm - po).detach().clone() for (_, pm), (_, po)
            in zip(mom.shared_named_parameters(), online.shared_named_parameters())]
    applied = m if ema_override is None else ema_override
    worst = 0.0
    for step in range(1, 21):
        momentum_update(mom, online, applied)
        for (_, pm), (_, po), g0 in zip(mom.shared_named_parameters(), online.shared_named_parameters(), gap0):
            worst = max(worst, float(((pm - po.detach()) - g0 * m ** step).abs().max()))
    return CheckResult("ema decay", worst <= tol, worst, tol, f"m={m}, 20 updates")


def run_all(ema_override: float | None = None, invariant_steps: int = 200, seed: int = 0) -> list[CheckResult]:
    checks: list[Callable[[], CheckResult]] = [
        lambda: check_loss_reference(seed=seed),
        lambda: check_nn_reference(seed=seed),
        lambda: check_gradients(seed=seed),
        lambda: check_combinations(seed=seed),
        lambda: check_ring_buffer(seed=seed),
        check_schedule,
        check_sgd,
        lambda: check_ema_decay(ema_override=ema_override),
        lambda: check_training_invariants(invariant_steps, seed, ema_override=ema_override),
    ]
    return [_timed(c) for c in checks]


def as_dict(result: CheckResult) -> dict:
    return dataclasses.asdict(result)
