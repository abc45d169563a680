import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedunlearn.datagen import (ClassSlice, Dirichlet, SyntheticSpec, aggregation_weights,
                                class_prototypes, class_value_table, generate,
                                label_for_regression, largest_remainder, partition_counts, to_csv)
from fedunlearn.errors import ConfigError


def test_class_slice_rotation():
    spec = SyntheticSpec(num_clients=10, num_classes=10, partition=ClassSlice(4))
    counts, _ = partition_counts(spec)
    for i in range(10):
        held = set(np.flatnonzero(counts[i]))
        assert held == {(i + j) % 10 for j in range(4)}
        assert counts[i].sum() == spec.samples_per_client


def test_full_slice_is_homogeneous_support():
    counts, _ = partition_counts(SyntheticSpec(num_classes=5, partition=ClassSlice(5)))
    assert all(set(np.flatnonzero(row)) == set(range(5)) for row in counts)


@pytest.mark.parametrize("bad", [
    SyntheticSpec(num_clients=0),
    SyntheticSpec(partition=ClassSlice(11)),
    SyntheticSpec(partition=Dirichlet(0.0)),
    SyntheticSpec(noise_sd=0.0),
    SyntheticSpec(samples_per_client=3, partition=ClassSlice(4)),
])
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        generate(bad)


def test_small_sample_warning():
    with pytest.warns(UserWarning, match="rank deficient"):
        SyntheticSpec(samples_per_client=5, partition=ClassSlice(2)).validate()


def test_prototypes_separated():
    for C, d in [(5, 10), (12, 4)]:
        P = class_prototypes(SyntheticSpec(num_classes=C, dim=d))
        dist = np.linalg.norm(P[:, None] - P[None], axis=-1)[np.triu_indices(C, 1)]
        assert dist.min() >= 2.0 - 1e-12


def test_generation_is_deterministic():
    spec = SyntheticSpec(partition=Dirichlet(0.3), seed=42)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels)


@given(st.floats(0.05, 5.0), st.integers(0, 10_000), st.integers(2, 12))
def test_dirichlet_conserves_samples_and_no_empty_clients(alpha, seed, N):
    spec = SyntheticSpec(num_clients=N, num_classes=6, dim=4, samples_per_client=12,
                         partition=Dirichlet(alpha), seed=seed)
    counts, props = partition_counts(spec)
    assert counts.sum() == N * 12
    assert np.all(counts.sum(axis=1) >= 1)
    assert np.allclose(props.sum(axis=0), 1.0)


@given(st.integers(0, 500), st.lists(st.floats(0.01, 10), min_size=1, max_size=8))
def test_largest_remainder_sums(total, fr):
    c = largest_remainder(total, fr)
    assert c.sum() == total and np.all(c >= 0)
    ideal = np.asarray(fr) / np.sum(fr) * total
    assert np.all(np.abs(c - ideal) < 1.0 + 1e-9)


def test_label_table_lookup():
    ds = label_for_regression(generate(SyntheticSpec(num_clients=2))[0])
    table = class_value_table(10)
    assert np.array_equal(ds.targets, table[ds.labels])
    assert table[0] == -1.0 and table[-1] == 1.0


def test_aggregation_weights_examples():
    assert np.allclose(aggregation_weights([2, 2, 6]), [0.2, 0.2, 0.6])
    assert np.allclose(aggregation_weights([5, 5, 5, 5]), 0.25)
    assert np.array_equal(aggregation_weights([7]), [1.0])
    with pytest.raises(ConfigError):
        aggregation_weights([])


def test_to_csv_roundtrip(tmp_path):
    data = generate(SyntheticSpec(num_clients=3, dim=2, num_classes=3, partition=ClassSlice(2)))
    path = tmp_path / "data.csv"
    to_csv(data, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["client_id", "label", "f0", "f1"]
    assert len(rows) - 1 == sum(d.n for d in data)
