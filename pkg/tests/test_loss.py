import math

import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from mnclglf.loss import LossConfig, LossShapeError, contrastive_L, split_losses, total_loss
from mnclglf.reference import infonce_termwise


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_orthonormal_pair_value():
    eye = torch.eye(2, dtype=torch.float64)
    assert float(contrastive_L(eye, eye, 1.0)) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert math.log(1 + math.exp(-1)) == pytest.approx(0.3133, abs=5e-5)


def test_single_row_has_zero_loss():
    h, p = _rand(3, 5, seed=1), _rand(1, 5, seed=2)
    assert float(contrastive_L(h, p)) == 0.0


@given(n=st.integers(1, 6), s=st.integers(1, 4), d=st.integers(1, 8), tau=st.floats(0.05, 5.0),
       seed=st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_matches_termwise_oracle(n, s, d, tau, seed):
    h, p = _rand(s * n, d, seed=seed), _rand(n, d, seed=seed + 1)
    expect = infonce_termwise(h.tolist(), p.tolist(), tau)
    assert float(contrastive_L(h, p, tau)) == pytest.approx(expect, rel=1e-9, abs=1e-12)


@given(seed=st.integers(0, 10**6), a=st.floats(0.01, 100.0), b=st.floats(0.01, 100.0))
@settings(max_examples=30, deadline=None)
def test_row_scale_invariance(seed, a, b):
    h, p = _rand(12, 6, seed=seed), _rand(4, 6, seed=seed + 7)
    base = float(contrastive_L(h, p))
    assert float(contrastive_L(h * a, p * b)) == pytest.approx(base, rel=1e-10)


def test_block_mean_equals_separate_calls():
    h, p = _rand(15, 4, seed=3), _rand(5, 4, seed=4)
    sep = [float(contrastive_L(b, p)) for b in h.split(5)]
    assert float(contrastive_L(h, p)) == pytest.approx(sum(sep) / 3, rel=1e-12)
    assert split_losses(h, p, 1.0).tolist() == pytest.approx(sep, rel=1e-12)


@given(n=st.integers(1, 16), seed=st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_loss_range_for_unit_rows(n, seed):
    # with tau = 1 and unit rows every logit lies in [-1, 1], so 0 <= L <= ln(N) + 2 per row
    h, p = _rand(n, 8, seed=seed), _rand(n, 8, seed=seed + 3)
    v = float(contrastive_L(h, p))
    assert 0.0 <= v <= math.log(n) + 2 + 1e-12


def test_identical_aligned_rows_beat_random():
    p = torch.nn.functional.normalize(_rand(8, 32, seed=5), dim=1)
    assert float(contrastive_L(p, p)) < float(contrastive_L(_rand(8, 32, seed=6), p))


def _terms(n=4, d=6, s=6, seed=0):
    r = lambda i, rows: _rand(rows, d, seed=seed + i)
    return dict(c1=r(0, s * n), c3=r(1, s * n), z1n=r(2, n), z2n=r(3, n), p1=r(4, n), p2=r(5, n), p3=r(6, n))


def test_total_is_sum_of_parts_with_swap_symmetry():
    t = _terms()
    cfg = LossConfig(1.0, 6.0)
    rep = total_loss(**t, cfg=cfg)
    ls = (float(contrastive_L(t["c1"], t["p3"])) + float(contrastive_L(t["c3"], t["p1"]))) / 2
    lm = (float(contrastive_L(t["z1n"], t["p2"])) + float(contrastive_L(t["z2n"], t["p1"]))) / 2
    assert float(rep.loss_s) == pytest.approx(ls, rel=1e-12)
    assert float(rep.loss_m) == pytest.approx(lm, rel=1e-12)
    assert float(rep.loss_total) == pytest.approx(ls + 6.0 * lm, rel=1e-12)
    assert len(rep.per_split) == 12
    swapped = dict(t, c1=t["c3"], c3=t["c1"], p1=t["p3"], p3=t["p1"])
    swapped_rep = total_loss(**swapped, cfg=cfg)
    assert float(swapped_rep.loss_s) == pytest.approx(float(rep.loss_s), rel=1e-12)


@given(lam=st.floats(0.01, 50.0), seed=st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_lambda_is_linear(lam, seed):
    t = _terms(seed=seed)
    rep = total_loss(**t, cfg=LossConfig(lam=lam))
    assert float(rep.loss_total) == pytest.approx(float(rep.loss_s) + lam * float(rep.loss_m), rel=1e-12)


def test_lambda_zero_limit_ignores_momentum_targets():
    t = _terms()
    a = total_loss(**t, cfg=LossConfig(), lam=0.0)
    b = total_loss(**dict(t, z1n=-t["z1n"], z2n=t["z2n"] * 3 + 1), cfg=LossConfig(), lam=0.0)
    assert float(a.loss_total) == float(b.loss_total) == float(a.loss_s)


def test_only_predictions_get_gradient_paths():
    t = _terms()
    preds = {k: t[k].clone().requires_grad_(True) for k in ("p1", "p2", "p3")}
    rep = total_loss(**dict(t, **preds), cfg=LossConfig())
    rep.loss_total.backward()
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in preds.values())


@pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(temperature=-1.0), dict(lam=0.0), dict(lam=-2.0)])
def test_config_rejects_nonpositive(kw):
    with pytest.raises(ValueError):
        LossConfig(**kw)


@pytest.mark.parametrize("h,p", [((5, 4), (2, 4)), ((4, 3), (2, 4)), ((4,), (2, 4)), ((0, 4), (0, 4))])
def test_shape_errors(h, p):
    with pytest.raises(LossShapeError):
        contrastive_L(torch.zeros(*h), torch.zeros(*p))
