import pytest

from mnclglf import experiments
from mnclglf.checks import noise_dataset, tiny_run
from mnclglf.config import EvalConfig
from mnclglf.data import Dataset


def _split(n=32, seed=0):
    ds = noise_dataset(n, seed=seed)
    test = Dataset(ds.images[: n // 2].clone(), ds.labels[: n // 2].clone(), ds.class_count, "eval")
    return ds, test


def test_pretrain_and_probe_records_milestones_and_is_deterministic(tmp_path):
    train, test = _split()
    run = tiny_run(batch_size=8, epochs=2)
    probe = EvalConfig(epochs=1, batch_size=16)
    a = experiments.pretrain_and_probe(train, test, tmp_path / "a", seed=1, run=run, milestones=(1,), probe=probe)
    b = experiments.pretrain_and_probe(train, test, tmp_path / "b", seed=1, run=run, milestones=(1,), probe=probe)
    assert sorted(a.milestone_top1) == [1, 2]
    assert a.trace_digest == b.trace_digest and a.top1 == b.top1
    c = experiments.pretrain_and_probe(train, test, tmp_path / "c", seed=1, run=run, single_embedding=True,
                                       probe=probe)
    assert c.trace_digest != a.trace_digest
    rnd = experiments.random_encoder_probe(train, test, tmp_path / "r", seed=1, run=run, probe=probe)
    assert 0.0 <= rnd <= 1.0


def test_reaches_within():
    p = experiments.PretrainProbe(0, False, 0.4, 0.9, "", None, {10: 0.2, 20: 0.35, 30: 0.4})
    assert experiments.reaches_within(p, 0.3, 30) == 20
    assert experiments.reaches_within(p, 0.3, 15) is None
    assert experiments.reaches_within(p, 0.5, 30) is None


def test_missing_dataset_is_reported(tmp_path, monkeypatch):
    monkeypatch.setenv(experiments.CIFAR_ENV, str(tmp_path / "nowhere"))
    with pytest.raises(experiments.DatasetUnavailable, match="MNCLGLF_CIFAR10"):
        experiments.cifar10_subsets()
