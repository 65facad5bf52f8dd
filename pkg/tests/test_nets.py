import pytest
import torch

from mnclglf.nets import (ModelConfig, NetworkStack, Role, StructureError, bn_mode, build_online, copy_from,
                          follower, forward_backprop, forward_momentum, grad_check, max_param_gap,
                          momentum_update, tie_weights)
from mnclglf.seeding import generator
from helpers import TINY, count_params, tiny_online


def _x(n=2, hw=8, seed=0, dtype=torch.float64):
    return torch.randn(n, 3, hw, hw, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_full_scale_shapes():
    stack = build_online(ModelConfig(), generator(0, "init"))
    z, p = forward_backprop(stack, torch.randn(2, 3, 32, 32))
    assert z.shape == (2, 2048) and p.shape == (2, 2048)
    assert stack.feature_dim == 512
    assert stack.backbone(torch.randn(2, 3, 16, 16)).shape == (2, 512)
    lin = [m for m in stack.projector if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in lin] == [(512, 2048), (2048, 2048), (2048, 2048)]
    lin = [m for m in stack.predictor if isinstance(m, torch.nn.Linear)]
    assert [(m.in_features, m.out_features) for m in lin] == [(2048, 512), (512, 2048)]


def test_projector_has_no_final_relu():
    stack = tiny_online()
    assert isinstance(stack.projector[-1], torch.nn.BatchNorm1d)
    relus = [i for i, m in enumerate(stack.projector) if isinstance(m, torch.nn.ReLU)]
    assert relus == [2, 5]


def test_roles_and_predictor_ownership():
    online = tiny_online()
    assert online.role is Role.BACKPROP and online.predictor is not None
    for role in (Role.MOMENTUM, Role.TIED_STOP_GRAD):
        f = follower(online, role)
        assert f.predictor is None
        assert all(not p.requires_grad for p in f.parameters())
    with pytest.raises(StructureError):
        NetworkStack(online.backbone, online.projector, None, Role.BACKPROP)


def test_zero_predictor_output_is_bias():
    stack = tiny_online()
    final = stack.predictor[-1]
    with torch.no_grad():
        final.weight.zero_()
        final.bias.copy_(torch.arange(final.out_features, dtype=torch.float64))
    _, p = forward_backprop(stack, _x(3))
    assert torch.equal(p, final.bias.detach().expand(3, -1))


def test_init_convention():
    stack = tiny_online()
    bn = stack.projector[1]
    assert torch.all(bn.weight == 1) and torch.all(bn.bias == 0)
    assert torch.all(stack.predictor[-1].bias == 0)
    w = stack.projector[0].weight.detach()
    assert float(w.abs().max()) <= (6.0 / w.shape[1]) ** 0.5


def test_finite_difference_sum_p():
    stack = tiny_online()
    x = _x(4)
    params = list(stack.named_parameters())
    report = grad_check(params, lambda: forward_backprop(stack, x)[1].sum() ** 2 * 1e-3, eps=1e-6,
                        samples_per_tensor=3)
    assert report.max_rel_err < 1e-4, report.worst


def test_momentum_forward_is_gradient_free():
    online = tiny_online()
    mom = follower(online, Role.MOMENTUM)
    x = _x(3).requires_grad_(True)
    z = forward_momentum(mom, x)
    assert not z.requires_grad
    assert all(p.grad is None for p in mom.parameters())


def test_momentum_matches_online_after_copy():
    online = tiny_online()
    mom = follower(online, Role.MOMENTUM)
    with torch.no_grad():
        for p in online.parameters():
            p.add_(0.1)
    copy_from(mom, online)
    x = _x(3)
    with bn_mode(online, False), bn_mode(mom, False):
        ref = online.projector(online.backbone(x))
        got = forward_momentum(mom, x)
    assert torch.equal(ref, got)


def test_momentum_single_row_batch():
    mom = follower(tiny_online(), Role.MOMENTUM)
    mom.train()
    assert forward_momentum(mom, _x(1)).shape == (1, 8)
    assert mom.training


def test_ema_arithmetic():
    online = tiny_online()
    mom = follower(online, Role.MOMENTUM)
    with torch.no_grad():
        for p in mom.parameters():
            p.fill_(1.0)
        for p in online.parameters():
            p.fill_(0.0)
    momentum_update(mom, online, 0.99)
    for p in mom.parameters():
        assert torch.all(p == 0.99)
    momentum_update(mom, online, 0.0)
    assert max_param_gap(mom, online) == 0.0


def test_ema_geometric_decay():
    online = tiny_online(seed=1)
    mom = follower(tiny_online(seed=2), Role.MOMENTUM)
    m = 0.9
    gap0 = [(pm - po).detach().clone() for (_, pm), (_, po) in
            zip(mom.shared_named_parameters(), online.shared_named_parameters())]
    for t in range(1, 6):
        momentum_update(mom, online, m)
        for g0, (_, pm), (_, po) in zip(gap0, mom.shared_named_parameters(), online.shared_named_parameters()):
            torch.testing.assert_close(pm - po, g0 * m ** t, rtol=1e-12, atol=1e-14)


def test_ema_stays_on_segment():
    online = tiny_online(seed=1)
    mom = follower(tiny_online(seed=2), Role.MOMENTUM)
    before = [p.detach().clone() for p in mom.parameters()]
    momentum_update(mom, online, 0.7)
    for b, (_, pm), (_, po) in zip(before, mom.shared_named_parameters(), online.shared_named_parameters()):
        lo, hi = torch.minimum(b, po), torch.maximum(b, po)
        assert torch.all(pm >= lo) and torch.all(pm <= hi)


def test_ema_rejects_bad_coefficient_and_structure():
    online = tiny_online()
    mom = follower(online, Role.MOMENTUM)
    with pytest.raises(ValueError):
        momentum_update(mom, online, 1.5)
    other = follower(build_online(ModelConfig(backbone="toy-cnn", toy_widths=(4, 6, 9), proj_hidden=8,
                                              proj_dim=8, pred_hidden=4), generator(0, "init"), 3,
                                  torch.float64), Role.MOMENTUM)
    with pytest.raises(StructureError, match="first divergent"):
        momentum_update(other, online, 0.5)


def test_tie_bit_exact():
    online = tiny_online(seed=1)
    sg = follower(tiny_online(seed=2), Role.TIED_STOP_GRAD)
    assert max_param_gap(sg, online) > 0
    tie_weights(sg, online)
    for (_, a), (_, b) in zip(sg.shared_named_parameters(), online.shared_named_parameters()):
        assert torch.equal(a, b)


def test_stopgrad_branch_sends_no_gradient():
    online = tiny_online()
    sg = follower(online, Role.TIED_STOP_GRAD)
    loss = sg(_x(4)).pow(2).sum()
    assert not loss.requires_grad
    assert all(p.grad is None for p in online.parameters())


def test_both_branches_equal_backprop_branch_alone():
    online = tiny_online()
    sg = follower(online, Role.TIED_STOP_GRAD)
    x, y = _x(4, seed=1), _x(4, seed=2)

    def grads(target_fn):
        online.zero_grad(set_to_none=True)
        _, p = forward_backprop(online, x)
        (target_fn() * p).sum().backward()
        return [q.grad.clone() for q in online.parameters()]

    with torch.no_grad():
        frozen = online.projector(online.backbone(y))
    through_sg = grads(lambda: sg(y))
    constant = grads(lambda: frozen)
    for a, b in zip(through_sg, constant):
        assert torch.equal(a, b)
    # positive control: routing the target through the online weights changes the gradient
    live = grads(lambda: online.projector(online.backbone(y)))
    assert any(not torch.allclose(a, b) for a, b in zip(live, constant))


def test_grad_check_quadratic_mlp():
    torch.manual_seed(0)
    mlp = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Tanh(), torch.nn.Linear(4, 2)).double()
    x = torch.randn(5, 3, dtype=torch.float64)
    report = grad_check(list(mlp.named_parameters()), lambda: mlp(x).pow(2).sum(), eps=1e-6,
                        samples_per_tensor=None)
    assert report.checked == sum(p.numel() for p in mlp.parameters())
    assert report.max_rel_err < 1e-6


def test_grad_check_constant_loss():
    w = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
    report = grad_check([("w", w)], lambda: (w * 0).sum() + 2.0, samples_per_tensor=None)
    assert report.max_abs_err == 0.0
    assert all(a == 0.0 and n == 0.0 for _, _, a, n in report.entries)


def test_grad_check_rejects_zero_eps():
    w = torch.nn.Parameter(torch.ones(1, dtype=torch.float64))
    with pytest.raises(ValueError):
        grad_check([("w", w)], lambda: w.sum(), eps=0.0)


def test_wrong_role_and_channel_errors():
    online = tiny_online()
    with pytest.raises(StructureError):
        forward_momentum(online, _x())
    with pytest.raises(StructureError, match="channels"):
        forward_backprop(online, torch.randn(2, 1, 8, 8, dtype=torch.float64))


def test_tiny_stack_is_small():
    assert count_params(tiny_online()) <= 5000
