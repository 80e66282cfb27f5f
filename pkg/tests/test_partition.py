import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcasim.datagen import SynthSpec, generate
from fcasim.partition import (MAX_RETRIES, Partition, PartitionError, PartitionSpec, alpha_by_frequency,
                              class_counts, compute_prior, dirichlet_partition, largest_remainder,
                              make_split1, make_split2)

LABELS = generate(SynthSpec()).labels


def _check_invariants(part: Partition, labels, spec: PartitionSpec):
    labels = np.asarray(labels)
    everything = np.concatenate(part.train + part.test + [part.dropped])
    # conservation: each index exactly once across assigned + dropped
    assert np.array_equal(np.sort(everything), np.arange(labels.size))
    for k in range(part.num_clients):
        tr, te = part.train[k], part.test[k]
        assert np.intersect1d(tr, te).size == 0
        for c in range(part.num_classes):
            n_tr = int(np.sum(labels[tr] == c))
            n = n_tr + int(np.sum(labels[te] == c))
            assert abs(n_tr - spec.train_fraction * n) <= 1
            if c in part.removed_classes[k]:
                assert n == 0


def test_single_client_gets_everything():
    spec = PartitionSpec(1, (1.0,) * 5)
    part = dirichlet_partition(LABELS, spec)
    assert part.assignment[0].size == LABELS.size and part.dropped.size == 0
    _check_invariants(part, LABELS, spec)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8), st.floats(0.0, 0.4))
def test_conservation_and_split_ratio(seed, K, p):
    spec = PartitionSpec(K, (0.5, 5.0, 10.0, 30.0, 50.0), p, 0.8, seed)
    try:
        part = dirichlet_partition(LABELS, spec)
    except PartitionError:
        return
    _check_invariants(part, LABELS, spec)


def test_deterministic():
    a, b = make_split2(LABELS, seed=3), make_split2(LABELS, seed=3)
    assert a.to_dict() == b.to_dict()
    assert make_split2(LABELS, seed=4).to_dict() != a.to_dict()


def test_high_alpha_is_near_uniform():
    spec_alpha = (1e6,) * 5
    for seed in range(20):
        part = dirichlet_partition(LABELS, PartitionSpec(4, spec_alpha, seed=seed))
        counts = np.array([a.size for a in part.assignment]) / LABELS.size
        assert np.all(np.abs(counts - 0.25) <= 0.05 * 0.25)


def test_split1_no_removed_classes_and_skewed_minority():
    ratios = []
    rare = int(np.argmin(np.bincount(LABELS)))
    for seed in range(20):
        part = make_split1(LABELS, seed=seed)
        assert all(not r for r in part.removed_classes) and part.dropped.size == 0
        counts = class_counts(part, LABELS) + class_counts(part, LABELS, "test")
        share = counts[:, rare]
        ratios.append(share.max() / max(share.min(), 1))
    assert np.mean(np.array(ratios) > 3) > 0.5


def test_split2_has_missing_classes():
    part = make_split2(LABELS, seed=0)
    assert np.any(class_counts(part, LABELS) == 0)
    assert any(part.removed_classes)


def test_split2_removal_rate():
    rates = [sum(len(r) for r in make_split2(LABELS, seed=s).removed_classes) / 50 for s in range(100)]
    assert abs(np.mean(rates) - 0.3) <= 0.05


def test_alpha_by_frequency_follows_counts():
    labels = np.array([2] * 9 + [0] * 5 + [1] * 1)
    assert alpha_by_frequency(labels, (50.0, 5.0, 0.5)) == (5.0, 0.5, 50.0)
    with pytest.raises(ValueError):
        alpha_by_frequency(labels, (1.0, 2.0))


def test_prior_counts_from_train_only():
    part = make_split2(LABELS, seed=1)
    for k in range(part.num_clients):
        prior = compute_prior(part, k, LABELS)
        assert prior.counts == tuple(np.bincount(LABELS[part.train[k]], minlength=5))
        assert abs(prior.pi.sum() - 1.0) <= 1e-12
    with pytest.raises(IndexError):
        compute_prior(part, 10, LABELS)


def test_starved_partition_fails_after_retries():
    labels = np.array([0, 0, 1])
    with pytest.raises(PartitionError):
        dirichlet_partition(labels, PartitionSpec(3, (0.1, 0.1)))
    assert MAX_RETRIES == 16


def test_largest_remainder_exact_total():
    for seed in range(50):
        p = np.random.default_rng(seed).dirichlet(np.ones(7))
        counts = largest_remainder(1001, p)
        assert counts.sum() == 1001 and np.all(np.abs(counts - 1001 * p) < 1)


def test_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(0, (1.0,))
    with pytest.raises(ValueError):
        PartitionSpec(2, (1.0, 0.0))
    with pytest.raises(ValueError):
        PartitionSpec(2, (1.0,), missing_class_prob=1.5)
    with pytest.raises(ValueError):
        dirichlet_partition(LABELS, PartitionSpec(2, (1.0, 1.0)))


def test_export_import_roundtrip(tmp_path):
    part = make_split2(LABELS, seed=2)
    part.save(tmp_path / "p.json")
    back = Partition.load(tmp_path / "p.json")
    assert back.to_dict() == part.to_dict()
