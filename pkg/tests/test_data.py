import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedbif.data import (
    Dataset,
    PartitionSpec,
    largest_remainder,
    load_csv,
    load_idx,
    make_blobs,
    partition,
)
from fedbif.errors import DataError, PartitionError, SpecificationError


def test_blobs_are_balanced_and_deterministic():
    split = make_blobs(1000, 5, 10, 2.0, seed=7)
    assert np.array_equal(np.bincount(split.train.labels), np.full(10, 100))
    again = make_blobs(1000, 5, 10, 2.0, seed=7)
    assert split.train.features.tobytes() == again.train.features.tobytes()
    assert split.test.features.tobytes() == again.test.features.tobytes()
    assert len(split.test) == 250
    assert not np.array_equal(make_blobs(1000, 5, 10, 2.0, seed=8).train.features, split.train.features)


def test_widely_separated_blobs_are_nearest_centroid_separable():
    split = make_blobs(5000, 6, 10, 1e4, seed=1)
    centers = split.centers[:, 0, :]
    dist = ((split.train.features[:, None, :] - centers[None]) ** 2).sum(-1)
    assert np.mean(dist.argmin(1) == split.train.labels) == 1.0


def test_ambient_embedding():
    split = make_blobs(200, 4, 3, 3.0, seed=0, ambient_dim=20, clusters_per_class=2)
    assert split.train.features.shape == (200, 20) and split.centers.shape == (3, 2, 4)
    e = split.embedding
    assert np.allclose(e @ e.T, np.eye(4), atol=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(n=5, d=2, num_classes=10, separation=1.0, seed=0),
    dict(n=50, d=0, num_classes=2, separation=1.0, seed=0),
    dict(n=50, d=2, num_classes=2, separation=0.0, seed=0),
    dict(n=50, d=4, num_classes=2, separation=1.0, seed=0, ambient_dim=3),
])
def test_blobs_reject_bad_counts(kwargs):
    with pytest.raises(SpecificationError):
        make_blobs(**kwargs)


def labelled(n, c, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, 2)), rng.permutation(np.arange(n) % c), c)


def test_iid_equal_shards():
    shards = partition(labelled(100, 10), PartitionSpec("iid", 10, 0))
    assert [len(s) for s in shards] == [10] * 10


@given(n=st.integers(20, 300), clients=st.integers(1, 12), seed=st.integers(0, 10**6),
       scheme=st.sampled_from(["iid", "dirichlet", "label_subset"]))
def test_partitions_are_exact(n, clients, seed, scheme):
    ds = labelled(n, 5, seed)
    spec = PartitionSpec(scheme, clients, seed, beta=0.3, fraction=0.4)
    try:
        shards = partition(ds, spec)
    except PartitionError:
        assert scheme == "label_subset" and clients * 2 < 5
        return
    merged = np.sort(np.concatenate(shards))
    assert np.array_equal(merged, np.arange(n))  # nothing lost, nothing duplicated
    assert all(len(s) >= 1 for s in shards) and len(shards) == clients
    if scheme == "iid":
        sizes = [len(s) for s in shards]
        assert max(sizes) - min(sizes) <= 1
    again = partition(ds, spec)
    assert all(np.array_equal(a, b) for a, b in zip(shards, again))


def test_dirichlet_follows_drawn_proportions():
    ds = labelled(2000, 10, 3)
    spec = PartitionSpec("dirichlet", 8, 11, beta=0.3)
    shards = partition(ds, spec)
    props = np.random.default_rng(11).dirichlet(np.full(8, 0.3), size=10)
    assert np.all(np.abs(props.sum(1) - 1) <= 1e-9)
    per_label = np.bincount(ds.labels)
    for j, shard in enumerate(shards):
        counts = np.bincount(ds.labels[shard], minlength=10)
        # largest-remainder rounding; an empty-shard repair may move one sample
        assert np.all(np.abs(counts - props[:, j] * per_label) < 2)
    skew = np.array([np.bincount(ds.labels[s], minlength=10) / len(s) for s in shards])
    assert skew.max() > 0.3  # beta = 0.3 gives visibly skewed label mixes


def test_label_subset_three_of_ten():
    ds = labelled(1000, 10, 0)
    shards = partition(ds, PartitionSpec("label_subset", 8, 5, fraction=0.3))
    assert all(len(np.unique(ds.labels[s])) == 3 for s in shards)
    covered = set().union(*(set(np.unique(ds.labels[s])) for s in shards))
    assert covered == set(range(10))


def test_label_subset_infeasible():
    with pytest.raises(PartitionError, match="cannot cover"):
        partition(labelled(100, 10), PartitionSpec("label_subset", 3, 0, fraction=0.3))


def test_too_few_samples():
    with pytest.raises(PartitionError):
        partition(labelled(4, 2), PartitionSpec("iid", 5, 0))


def test_empty_shard_repair():
    # with a tiny beta most clients draw nothing for the only label
    ds = labelled(12, 1, 0)
    shards = partition(ds, PartitionSpec("dirichlet", 6, 2, beta=0.01))
    assert all(len(s) >= 1 for s in shards)
    assert np.array_equal(np.sort(np.concatenate(shards)), np.arange(12))


def test_spec_validation():
    for kw in (dict(scheme="shards"), dict(clients=0), dict(scheme="dirichlet", beta=0.0),
               dict(scheme="label_subset", fraction=1.5)):
        with pytest.raises(SpecificationError):
            PartitionSpec(**kw)


def test_largest_remainder():
    assert largest_remainder(10, np.array([0.25, 0.25, 0.5])).tolist() == [3, 2, 5]
    assert largest_remainder(7, np.array([1 / 3] * 3)).sum() == 7


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.array([0, 1, 2]), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)


def test_csv_loader(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f1,f2,label\n0.5,1.5,0\n-1,2,2\n3,4,1\n")
    ds = load_csv(path)
    assert ds.features.tolist() == [[0.5, 1.5], [-1.0, 2.0], [3.0, 4.0]]
    assert ds.labels.tolist() == [0, 2, 1] and ds.num_classes == 3
    (tmp_path / "bad.csv").write_text("1,2,0.5\n")
    with pytest.raises(DataError):
        load_csv(tmp_path / "bad.csv")


def idx_bytes(arr):
    return bytes([0, 0, 8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


def test_idx_loader(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    (tmp_path / "x.idx").write_bytes(idx_bytes(images))
    with gzip.open(tmp_path / "y.idx.gz", "wb") as fh:
        fh.write(idx_bytes(np.array([1, 0])))
    ds = load_idx(tmp_path / "x.idx", tmp_path / "y.idx.gz")
    assert ds.features.shape == (2, 9) and ds.features[1, 0] == 90 / 255
    assert ds.labels.tolist() == [1, 0]
    (tmp_path / "short.idx").write_bytes(idx_bytes(images)[:-1])
    with pytest.raises(DataError):
        load_idx(tmp_path / "short.idx", tmp_path / "y.idx.gz")
