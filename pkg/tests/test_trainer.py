import csv
import math

import pytest
import torch

from mnclglf import checkpoint
from mnclglf.checks import (check_sgd, full_loss_closure, noise_dataset, tiny_run, training_invariants)
from mnclglf.data import batches
from mnclglf.nets import NumericalError, grad_check, max_param_gap
from mnclglf.trainer import TRACE_FIELDS, Trainer, _param_groups, cosine_lr, fit, load_online


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 1000, 0.1, 0.0) == 0.1
    assert cosine_lr(1000, 1000, 0.1, 0.0) == 0.0
    assert abs(cosine_lr(500, 1000, 0.1, 0.0) - 0.05) <= 1e-12


def test_cosine_clamps_and_is_monotone():
    assert cosine_lr(5000, 1000, 0.1, 0.01) == 0.01
    assert cosine_lr(0, 0, 0.1) == 0.0
    lrs = [cosine_lr(s, 50, 0.8) for s in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, 0.1)


def test_sgd_matches_hand_recursion():
    result = check_sgd()
    assert result.passed, result.line()


def test_batchnorm_parameters_are_not_decayed():
    trainer = Trainer(tiny_run(), 3, torch.float64)
    groups = _param_groups(trainer.online, 1e-4, bn_decay=False)
    bn_ids = {id(p) for m in trainer.online.modules() if isinstance(m, torch.nn.BatchNorm1d | torch.nn.BatchNorm2d)
              for p in m.parameters()}
    assert {id(p) for p in groups[1]["params"]} == bn_ids and groups[1]["weight_decay"] == 0.0
    assert not bn_ids & {id(p) for p in groups[0]["params"]}


def _step_batch(n=8, seed=0):
    return batches(noise_dataset(n, seed=seed), n, seed)[0]


def test_one_step_shapes_and_tie():
    trainer = Trainer(tiny_run(batch_size=8), 3, torch.float64)
    from mnclglf.augment import make_triple

    views = [v.images for v in make_triple(_step_batch(), trainer.run.augment, 0)]
    report, targets = trainer.compute_loss(views)
    assert targets["c1"].shape == (6 * 8, 8) and targets["z1n"].shape == (8, 8)
    assert not any(t.requires_grad for t in targets.values())
    assert len(report.per_split) == 12
    trace = trainer.train_step(_step_batch(), total_steps=10)
    assert trace.step == 0 and trainer.step == 1 and trace.lr == 0.1
    assert max_param_gap(trainer.stopgrad, trainer.online) == 0.0
    assert math.isfinite(trace.loss_total) and -1 <= trace.nn_cos_mean <= 1


def test_online_moves_and_momentum_lags():
    trainer = Trainer(tiny_run(), 3, torch.float64)
    before = [p.detach().clone() for _, p in trainer.online.shared_named_parameters()]
    trainer.train_step(_step_batch(), total_steps=10)
    moved = max(float((p.detach() - b).abs().max()) for (_, p), b in zip(trainer.online.shared_named_parameters(), before))
    assert moved > 0
    assert 0 < max_param_gap(trainer.momentum, trainer.online) < moved


def test_same_seed_same_trace_stream():
    rows = []
    for _ in range(2):
        trainer = Trainer(tiny_run(seed=3), 3, torch.float64)
        rows.append([trainer.train_step(b, 6).row() for b in batches(noise_dataset(24, seed=3), 8, 3)])
    assert rows[0] == rows[1]
    other = Trainer(tiny_run(seed=4), 3, torch.float64)
    assert other.train_step(batches(noise_dataset(24, seed=3), 8, 3)[0], 6).row() != rows[0][0]


def test_invariants_hold_for_every_step():
    rep = training_invariants(steps=30)
    assert rep.ok(), rep.first_failure
    assert rep.steps == 30


def test_corrupted_ema_is_detected():
    rep = training_invariants(steps=3, ema_override=0.9)
    assert not rep.ok() and rep.ema_max_error > 1e-6


def test_gradient_direction_with_dominant_momentum_term():
    trainer, loss_fn = full_loss_closure(seed=2, lam=100.0)
    params = list(trainer.online.named_parameters())
    rep = grad_check(params, loss_fn, eps=1e-5, samples_per_tensor=None)
    a = torch.tensor([e[2] for e in rep.entries], dtype=torch.float64)
    n = torch.tensor([e[3] for e in rep.entries], dtype=torch.float64)
    assert float(torch.nn.functional.cosine_similarity(a, n, dim=0)) > 1 - 1e-9


def test_grad_check_catches_a_wrong_backward():
    class Skewed(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.clone()

        @staticmethod
        def backward(ctx, g):
            return g * 1.01

    trainer, loss_fn = full_loss_closure(seed=0)
    params = list(trainer.online.named_parameters())[:2]
    rep = grad_check(params, lambda: Skewed.apply(loss_fn()), eps=1e-5, samples_per_tensor=3, floor=1e-5)
    assert rep.max_rel_err > 5e-3


def test_non_finite_loss_aborts_with_diagnostics():
    trainer = Trainer(tiny_run(), 3, torch.float64)
    with torch.no_grad():
        next(trainer.online.predictor.parameters()).fill_(float("nan"))
    with pytest.raises(NumericalError, match="non-finite loss at step 0"):
        trainer.train_step(_step_batch(), 10)


def test_single_embedding_mode_is_seeded_and_shares_init():
    full = Trainer(tiny_run(seed=5), 3, torch.float64)
    single = Trainer(tiny_run(seed=5, single_embedding=True), 3, torch.float64)
    for (_, a), (_, b) in zip(full.online.named_parameters(), single.online.named_parameters()):
        assert torch.equal(a, b)
    rows = [Trainer(tiny_run(seed=5, single_embedding=True), 3, torch.float64).train_step(_step_batch(), 4).row()
            for _ in range(2)]
    assert rows[0] == rows[1]


def _trace_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_fit_smoke(tmp_path):
    ds = noise_dataset(64, seed=1)
    res = fit(ds, tiny_run(seed=1, batch_size=16, epochs=3), tmp_path)
    rows = _trace_rows(res.trace)
    assert tuple(rows[0]) == TRACE_FIELDS and len(rows) == 1 + 3 * 4
    assert all(math.isfinite(float(r[5])) for r in rows[1:])
    assert [int(r[0]) for r in rows[1:]] == list(range(12))
    assert (tmp_path / "final.ckpt").exists() and (tmp_path / "timing.csv").exists()
    _, _, meta = checkpoint.load(res.checkpoint)
    assert meta["step"] == "12" and meta["epoch"] == "3"


def test_resume_reproduces_uninterrupted_run(tmp_path):
    ds = noise_dataset(48, seed=2)
    run = tiny_run(seed=2, batch_size=16, epochs=3)
    full = fit(ds, run, tmp_path / "full", milestones=(1,))
    resumed = fit(ds, run, tmp_path / "resumed", resume=full.milestones[1])
    full_rows = _trace_rows(full.trace)
    assert _trace_rows(resumed.trace)[1:] == full_rows[1 + 3:]
    a, _, _ = checkpoint.load(full.checkpoint)
    b, _, _ = checkpoint.load(resumed.checkpoint)
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_zero_epochs_saves_initial_state(tmp_path):
    ds = noise_dataset(16)
    run = tiny_run(batch_size=8, epochs=0)
    res = fit(ds, run, tmp_path, dtype=torch.float64)
    assert len(_trace_rows(res.trace)) == 1
    saved, _, _ = checkpoint.load(res.checkpoint)
    fresh = Trainer(run, 3, torch.float64).state_tensors()
    assert saved.keys() == fresh.keys() and all(torch.equal(saved[k], fresh[k]) for k in fresh)
    stack, _ = load_online(res.checkpoint)
    assert stack.backbone.out_dim == 8


def test_restore_rejects_mismatched_structure(tmp_path):
    trainer = Trainer(tiny_run(), 3, torch.float64)
    tensors = trainer.state_tensors()
    tensors.pop("online.projector.0.weight")
    with pytest.raises(checkpoint.CheckpointError, match="structure mismatch"):
        Trainer(tiny_run(), 3, torch.float64).load_tensors(tensors)
