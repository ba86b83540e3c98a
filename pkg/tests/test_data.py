import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmmx.data import (
    SpecError,
    SyntheticSpec,
    assign_modalities,
    dirichlet_partition,
    generate_dataset,
    load_split,
    nearest_prototype_accuracy,
    save_split,
)


def test_zero_noise_samples_equal_prototypes():
    split = generate_dataset(SyntheticSpec(noise_std=0.0, samples_per_client=30))
    for c in split.clients:
        for m in c.modalities:
            np.testing.assert_array_equal(c.data.features[m], split.prototypes[m][c.data.labels])
    for m, x in split.test.features.items():
        np.testing.assert_array_equal(x, split.prototypes[m][split.test.labels])


def test_generation_is_deterministic():
    spec = SyntheticSpec(seed=1234)
    a, b = generate_dataset(spec), generate_dataset(spec)
    assert [c.modalities for c in a.clients] == [c.modalities for c in b.clients]
    for ca, cb in zip(a.clients, b.clients):
        assert ca.data.labels.tobytes() == cb.data.labels.tobytes()
        for m in ca.modalities:
            assert ca.data.features[m].tobytes() == cb.data.features[m].tobytes()
    assert all(a.test.features[m].tobytes() == b.test.features[m].tobytes() for m in a.test.modalities)


def test_different_seeds_differ():
    a = generate_dataset(SyntheticSpec(seed=1))
    b = generate_dataset(SyntheticSpec(seed=2))
    assert not np.array_equal(a.test.features["vision"], b.test.features["vision"])


def test_split_invariants():
    spec = SyntheticSpec(num_clients=7, samples_per_client=50)
    split = generate_dataset(spec)
    assert split.total_train == 7 * 50
    for c in split.clients:
        assert c.n == len(c.data.labels) > 0
        assert set(c.data.modalities) == set(c.modalities)
        for m in c.modalities:
            assert c.data.features[m].shape == (c.n, spec.dims[m])
        assert c.data.labels.min() >= 0 and c.data.labels.max() < spec.num_classes
    assert split.test.modalities == spec.modality_ids
    assert len(split.test) == spec.test_size


def _mean_max_share(split):
    shares = []
    for c in split.clients:
        counts = np.bincount(c.data.labels, minlength=split.spec.num_classes)
        shares.append(counts.max() / counts.sum())
    return float(np.mean(shares))


def _dirichlet_oracle(K, C, alpha, n_per_class, seeds):
    """Expected mean max label share from direct Dirichlet draws (no partition code)."""
    vals = []
    for s in seeds:
        rng = np.random.default_rng(10_000 + s)
        counts = np.stack([rng.dirichlet(np.full(K, alpha)) * n_per_class for _ in range(C)], axis=1)
        counts = counts[counts.sum(1) > 0]
        vals.append(np.mean(counts.max(1) / counts.sum(1)))
    return float(np.mean(vals))


def test_small_alpha_is_skewed():
    spec = SyntheticSpec(num_clients=10, num_classes=4, dirichlet_alpha=0.1)
    observed = np.mean([_mean_max_share(generate_dataset(dataclasses.replace(spec, seed=s))) for s in range(20)])
    oracle = _dirichlet_oracle(10, 4, 0.1, 500, range(200))
    assert observed > 0.5
    assert abs(observed - oracle) < 0.08


def test_partition_single_client():
    labels = np.array([0, 1, 1, 2])
    parts = dirichlet_partition(labels, 1, 0.5, np.random.default_rng(0))
    assert len(parts) == 1 and parts[0].tolist() == [0, 1, 2, 3]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.floats(0.01, 100.0), st.integers(0, 2**32 - 1), st.integers(0, 60))
def test_partition_is_a_partition(K, alpha, seed, extra):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, size=K + extra)
    parts = dirichlet_partition(labels, K, alpha, np.random.default_rng(seed))
    assert len(parts) == K
    assert all(len(p) > 0 for p in parts)
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(len(labels)))


def test_partition_large_alpha_near_uniform():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(4), 1000)
        parts = dirichlet_partition(labels, 4, 1000.0, rng)
        for p in parts:
            hist = np.bincount(labels[p], minlength=4) / len(p)
            assert np.all(np.abs(hist - 0.25) <= 0.05)


def test_partition_errors():
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 3, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], 2, 0.0, np.random.default_rng(0))


def test_assign_full_profile():
    sets = assign_modalities(6, [(("vision", "text"), 1.0)], np.random.default_rng(0))
    assert sets == [("vision", "text")] * 6


def test_assign_exact_split():
    sets = assign_modalities(10, [(("vision",), 0.5), (("text",), 0.5)], np.random.default_rng(3))
    assert sets.count(("vision",)) == 5 and sets.count(("text",)) == 5


def test_assign_largest_remainder():
    sets = assign_modalities(10, [(("vision", "text"), 0.55), (("vision",), 0.25), (("text",), 0.2)],
                             np.random.default_rng(0))
    # raw 5.5, 2.5, 2.0 -> floors 5, 2, 2, leftover seat goes to the first tied remainder
    assert sets.count(("vision", "text")) == 6
    assert sets.count(("vision",)) == 2 and sets.count(("text",)) == 2


@pytest.mark.parametrize("K", range(1, 7))
@pytest.mark.parametrize("seed", range(5))
def test_assign_repairs_missing_modality(K, seed):
    sets = assign_modalities(K, [(("vision",), 1.0)], np.random.default_rng(seed),
                             modality_ids=("vision", "text"))
    # enumeration of the repair rule: exactly one client gains text, nobody loses vision
    assert sum(s == ("vision", "text") for s in sets) == 1
    assert sum(s == ("vision",) for s in sets) == K - 1


def test_generate_records_repairs():
    spec = SyntheticSpec(modality_profile=((("vision",), 1.0),))
    split = generate_dataset(spec)
    assert split.repairs and "text" in split.repairs[0]
    assert any("text" in c.modalities for c in split.clients)


def test_assign_rejects_empty_profile():
    with pytest.raises(ValueError):
        assign_modalities(3, [((), 1.0)], np.random.default_rng(0), modality_ids=("vision",))


@pytest.mark.parametrize("field,value", [
    ("num_classes", 1),
    ("noise_std", -0.1),
    ("num_clients", 0),
    ("dirichlet_alpha", 0.0),
    ("samples_per_client", 0),
    ("modalities", (("vision", 0),)),
    ("modality_profile", ((("vision",), 0.5),)),
])
def test_invalid_spec_names_field(field, value):
    with pytest.raises(SpecError) as info:
        generate_dataset(dataclasses.replace(SyntheticSpec(), **{field: value}))
    assert info.value.field == field


def test_zero_noise_nearest_prototype_is_perfect():
    split = generate_dataset(SyntheticSpec(noise_std=0.0))
    assert nearest_prototype_accuracy(split) == 1.0


def test_default_noise_nearest_prototype_oracle():
    accs = [nearest_prototype_accuracy(generate_dataset(SyntheticSpec(seed=s))) for s in range(5)]
    assert min(accs) >= 0.98


def test_json_roundtrip(tmp_path):
    split = generate_dataset(SyntheticSpec(num_clients=3, samples_per_client=20, test_size=30))
    path = tmp_path / "d.json"
    save_split(split, path)
    back = load_split(path)
    assert back.spec == split.spec
    for a, b in zip(split.clients, back.clients):
        assert a.modalities == b.modalities
        np.testing.assert_array_equal(a.data.labels, b.data.labels)
        for m in a.modalities:
            assert a.data.features[m].tobytes() == b.data.features[m].tobytes()
    for m in split.test.modalities:
        assert split.test.features[m].tobytes() == back.test.features[m].tobytes()
    save_split(back, tmp_path / "e.json")
    assert (tmp_path / "e.json").read_bytes() == path.read_bytes()
