from __future__ import annotations

import numpy as np
import pytest

from genefl.data import (
    Dataset,
    Dirichlet,
    PartitionSpec,
    Sharding,
    dirichlet_proportions,
    export_partition_manifest,
    load_csv,
    make_synthetic,
    partition_dirichlet,
    partition_sharding,
    save_csv,
    split_known_agnostic,
    subset_by_classes,
)


def test_make_synthetic_counts_and_range():
    ds = make_synthetic(2, 1, 5, seed=0)
    assert len(ds) == 2
    assert sorted(np.unique(ds.labels)) == [0, 1]
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0


def test_make_synthetic_deterministic_per_seed():
    a = make_synthetic(4, 20, 8, seed=123)
    b = make_synthetic(4, 20, 8, seed=123)
    c = make_synthetic(4, 20, 8, seed=124)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, c.inputs)


def test_make_synthetic_linearly_separable_by_probe():
    # Independent oracle: a logistic-regression probe on half the data.
    from sklearn.linear_model import LogisticRegression

    ds = make_synthetic(4, 200, 16, seed=7)
    rng = np.random.default_rng(0)
    order = rng.permutation(len(ds))
    half = len(ds) // 2
    train, test = order[:half], order[half:]
    probe = LogisticRegression(max_iter=2000)
    probe.fit(ds.inputs[train], ds.labels[train])
    assert probe.score(ds.inputs[test], ds.labels[test]) > 0.9


def test_split_known_agnostic_partitions_classes():
    ds = make_synthetic(6, 5, 4, seed=1)
    known, agnostic = split_known_agnostic(ds.class_ids, 0.5, seed=2)
    assert known | agnostic == set(ds.class_ids)
    assert known & agnostic == set()


def test_split_known_agnostic_half_of_ten_is_five():
    known, agnostic = split_known_agnostic(range(10), 0.5, seed=3)
    assert len(known) == 5
    assert len(agnostic) == 5


def test_split_known_agnostic_deterministic():
    assert split_known_agnostic(range(8), 0.5, seed=4) == split_known_agnostic(
        range(8), 0.5, seed=4
    )


def test_split_known_agnostic_rejects_tiny_class_sets():
    with pytest.raises(ValueError):
        split_known_agnostic([0], 0.5, seed=0)


def test_sharding_single_client_gets_everything():
    ds = make_synthetic(3, 10, 4, seed=5)
    shards = partition_sharding(ds, PartitionSpec(Sharding(3), 1, seed=6))
    assert len(shards) == 1
    assert len(shards[0]) == len(ds)
    assert shards[0].present_classes == set(ds.class_ids)


@pytest.mark.parametrize("s,n_clients", [(2, 5), (4, 12), (3, 7)])
def test_sharding_every_shard_has_exactly_s_classes(s, n_clients):
    ds = make_synthetic(10, 30, 4, seed=8)
    shards = partition_sharding(ds, PartitionSpec(Sharding(s), n_clients, seed=9))
    for shard in shards:
        assert len(shard.present_classes) == s


def test_sharding_no_duplicate_assignment():
    ds = make_synthetic(6, 40, 4, seed=10)
    shards = partition_sharding(ds, PartitionSpec(Sharding(3), 8, seed=11))
    all_idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(all_idx)) == len(all_idx)


def test_sharding_rejects_s_above_class_count():
    ds = make_synthetic(3, 10, 4, seed=12)
    with pytest.raises(ValueError):
        partition_sharding(ds, PartitionSpec(Sharding(4), 2, seed=13))


def _reference_sharding_allocator(dataset, s, n_clients, seed):
    """Independent re-implementation of the documented block allocator."""
    classes = list(dataset.class_ids)
    rng = np.random.default_rng(seed)
    perm = [int(c) for c in rng.permutation(classes)]
    takers = {c: [] for c in classes}
    for client in range(n_clients):
        for j in range(s):
            takers[perm[(client * s + j) % len(classes)]].append(client)
    out = {c: [] for c in range(n_clients)}
    for c in classes:
        if not takers[c]:
            continue
        idx_c = np.flatnonzero(dataset.labels == c)
        order = rng.permutation(takers[c])
        for client, block in zip(order, np.array_split(idx_c, len(takers[c]))):
            out[int(client)].extend(int(i) for i in block)
    return {c: sorted(v) for c, v in out.items()}


def test_sharding_matches_reference_allocator():
    ds = make_synthetic(10, 60, 4, seed=21)
    spec = PartitionSpec(Sharding(4), 12, seed=22)
    shards = partition_sharding(ds, spec)
    expected = _reference_sharding_allocator(ds, 4, 12, 22)
    for shard in shards:
        assert sorted(int(i) for i in shard.indices) == expected[shard.owner_id]


def test_dirichlet_conserves_samples_per_class():
    ds = make_synthetic(5, 37, 4, seed=14)
    shards = partition_dirichlet(ds, PartitionSpec(Dirichlet(0.5), 6, seed=15))
    all_idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(all_idx)) == len(all_idx) == len(ds)


@pytest.mark.parametrize("beta", [0.1, 0.5])
def test_dirichlet_benchmark_betas_supported(beta):
    ds = make_synthetic(4, 25, 4, seed=16)
    shards = partition_dirichlet(ds, PartitionSpec(Dirichlet(beta), 5, seed=17))
    assert all(len(s) >= 1 for s in shards)


def test_dirichlet_draw_matches_gamma_normalization_oracle():
    rng_impl = np.random.default_rng(99)
    rng_oracle = np.random.default_rng(99)
    for _ in range(20):
        p = dirichlet_proportions(rng_impl, 0.5, 8)
        g = rng_oracle.standard_gamma(0.5, 8)
        expected = g / g.sum()
        assert np.allclose(p, expected, atol=1e-12)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_dirichlet_repairs_empty_shards():
    # beta small enough that some client would get nothing without repair.
    ds = make_synthetic(2, 12, 4, seed=18)
    shards = partition_dirichlet(ds, PartitionSpec(Dirichlet(0.1), 8, seed=19))
    assert all(len(s) >= 1 for s in shards)
    all_idx = np.concatenate([s.indices for s in shards])
    assert len(np.unique(all_idx)) == len(ds)


def test_subset_by_classes_restricts_and_maps_rows():
    ds = make_synthetic(5, 10, 4, seed=20)
    sub, rows = subset_by_classes(ds, {1, 3})
    assert set(np.unique(sub.labels)) == {1, 3}
    assert np.array_equal(ds.inputs[rows], sub.inputs)


def test_load_csv_parses_two_rows(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("label,f_1,f_2\n0,0.25,0.5\n1,1.0,0.0\n")
    ds = load_csv(path)
    assert len(ds) == 2
    assert ds.class_ids == (0, 1)
    assert np.allclose(ds.inputs, [[0.25, 0.5], [1.0, 0.0]])


def test_load_csv_rejects_short_row_with_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,f_1,f_2\n0,0.25,0.5\n1,0.75\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(path)


def test_load_csv_rejects_non_numeric_with_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,f_1\n0,0.5\nx,0.5\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(path)


def test_load_csv_missing_file():
    with pytest.raises(FileNotFoundError):
        load_csv("/nonexistent/nope.csv")


def test_csv_round_trip_bit_exact_float32(tmp_path):
    ds = make_synthetic(3, 17, 6, seed=23)
    path = tmp_path / "ds.csv"
    save_csv(ds, path)
    back = load_csv(path)
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.labels, ds.labels)


def test_partition_manifest_export(tmp_path):
    import json

    ds = make_synthetic(4, 12, 4, seed=24)
    shards = partition_sharding(ds, PartitionSpec(Sharding(2), 4, seed=25))
    path = tmp_path / "manifest.json"
    export_partition_manifest(shards, path)
    manifest = json.loads(path.read_text())
    assert set(manifest) == {"0", "1", "2", "3"}
    for shard in shards:
        entry = manifest[str(shard.owner_id)]
        assert entry["indices"] == [int(i) for i in shard.indices]
        assert entry["classes"] == sorted(shard.present_classes)


def test_dataset_validates_class_coverage():
    with pytest.raises(ValueError):
        Dataset(inputs=np.zeros((2, 2)), labels=np.array([0, 0]), class_ids=(0, 1))
