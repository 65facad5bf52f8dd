import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from mnclglf.support import QueueError, SupportQueue, enqueue, init_random, nn_indices, nn_lookup
from mnclglf.reference import nn_brute_force, ring_contents


def test_init_rows_are_unit_norm_and_seeded():
    q = init_random(8, 4, seed=1)
    assert q.storage.shape == (8, 4)
    assert torch.allclose(q.storage.norm(dim=1), torch.ones(8), atol=1e-6)
    assert torch.equal(q.storage, init_random(8, 4, seed=1).storage)
    assert not q.initialized.any()


def test_full_size_storage_budget():
    q = SupportQueue(torch.empty(16384, 2048))
    assert q.nbytes() == 16384 * 2048 * 4 == 128 * 2**20


@pytest.mark.parametrize("cap,dim", [(0, 4), (4, 0)])
def test_init_rejects_empty(cap, dim):
    with pytest.raises(QueueError):
        init_random(cap, dim, 0)


def test_lookup_picks_larger_cosine():
    q = SupportQueue(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    out = nn_lookup(q, torch.tensor([[0.1, 0.9]]))
    assert torch.equal(out, torch.tensor([[0.0, 1.0]]))


def test_lookup_exact_match_and_normalized_return():
    rows = torch.tensor([[3.0, 4.0], [1.0, 0.0], [0.0, -2.0]])
    q = SupportQueue(rows.clone())
    out = nn_lookup(q, torch.tensor([[3.0, 4.0]]))
    assert torch.allclose(out, torch.tensor([[0.6, 0.8]]))


def test_ties_go_to_lowest_slot():
    rows = torch.tensor([[0.0, 1.0], [1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    q = SupportQueue(rows)
    assert nn_indices(q, torch.tensor([[5.0, 0.0]])).tolist() == [1]


def test_dim_mismatch():
    with pytest.raises(QueueError):
        nn_lookup(init_random(4, 3, 0), torch.zeros(2, 4))


@given(seed=st.integers(0, 10**6), cap=st.integers(1, 64), nq=st.integers(1, 32), d=st.integers(1, 8))
@settings(max_examples=40, deadline=None)
def test_lookup_matches_brute_force(seed, cap, nq, d):
    g = torch.Generator().manual_seed(seed)
    q = SupportQueue(torch.randn(cap, d, generator=g, dtype=torch.float64))
    z = torch.randn(nq, d, generator=g, dtype=torch.float64)
    assert nn_indices(q, z).tolist() == nn_brute_force(q.storage.tolist(), z.tolist())


def test_lookup_is_read_only():
    q = init_random(16, 4, 0)
    before = q.storage.clone(), q.slot_batch.clone(), q.cursor
    nn_lookup(q, torch.randn(5, 4))
    assert torch.equal(q.storage, before[0]) and torch.equal(q.slot_batch, before[1]) and q.cursor == before[2]


def _labelled(values):
    return torch.tensor([[float(v), 1.0] for v in values])


def test_ring_semantics():
    q = SupportQueue(torch.zeros(4, 2))
    enqueue(q, _labelled([1, 2, 3, 4]))
    enqueue(q, _labelled([5]))
    assert q.storage[:, 0].tolist() == [5.0, 2.0, 3.0, 4.0]
    assert q.cursor == 1


def test_full_replacement():
    q = init_random(4, 2, 0)
    enqueue(q, _labelled([7, 8, 9, 10]))
    assert q.storage[:, 0].tolist() == [7.0, 8.0, 9.0, 10.0]
    assert q.initialized.all()


def test_oversized_batch_rejected():
    with pytest.raises(QueueError):
        enqueue(init_random(4, 2, 0), torch.zeros(5, 2))


def test_first_batch_evicted_after_three_batches_of_256_into_512():
    q = init_random(512, 8, 0)
    first = torch.randn(256, 8, generator=torch.Generator().manual_seed(1))
    enqueue(q, first)
    for s in (2, 3):
        enqueue(q, torch.randn(256, 8, generator=torch.Generator().manual_seed(s)))
    stored = {tuple(r) for r in q.storage.tolist()}
    assert not any(tuple(r) in stored for r in first.tolist())
    assert (q.slot_batch != 0).all()


@given(cap=st.integers(1, 40), bs=st.integers(1, 40), n_batches=st.integers(1, 12))
@settings(max_examples=80, deadline=None)
def test_fifo_matches_ring_simulation_and_age_arithmetic(cap, bs, n_batches):
    bs = min(bs, cap)
    q = SupportQueue(torch.zeros(cap, 1))
    batches = [[t * 1000 + i for i in range(bs)] for t in range(n_batches)]
    for t, b in enumerate(batches):
        enqueue(q, torch.tensor(b, dtype=torch.float32).view(-1, 1))
        assert q.storage.view(-1).tolist() == ring_contents(cap, batches[:t + 1], [0.0] * cap)
        # batch u is fully gone exactly ceil(cap/bs) batches after it was written
        w = math.ceil(cap / bs)
        for u in range(t + 1):
            present = bool((q.slot_batch == u).any())
            assert present == (t - u < w)
    assert bool(q.initialized.all()) == (n_batches * bs >= cap)


def test_state_roundtrip():
    q = init_random(6, 3, 0)
    enqueue(q, torch.ones(4, 3))
    r = SupportQueue.from_state(q.state())
    assert torch.equal(r.storage, q.storage) and r.cursor == q.cursor and r.inserted == q.inserted
