"""Dataset loading, IDX round-trips, and p/q partition behavior."""
import os

import numpy as np
import pytest

from protofed import data
from protofed.errors import IngestionError, InputError, PartitionError
from protofed.rng import Rng


def id_dataset(num_classes=4, per_class=12):
    """Feature = unique sample id, so shard contents are traceable."""
    n = num_classes * per_class
    x = np.arange(n, dtype=np.float64).reshape(n, 1)
    y = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return data.Dataset(x, y, num_classes)


def test_round_half_up():
    assert data.round_half_up(0.5) == 1
    assert data.round_half_up(1.5) == 2
    assert data.round_half_up(2.5) == 3
    assert data.round_half_up(2.4) == 2
    assert data.round_half_up(-0.5) == 0
    assert data.round_half_up(-1.5) == -1
    assert data.round_half_up(-2.6) == -3
    assert data.round_half_up(3.0) == 3


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 3, size=7, dtype=np.uint8)
    ip = str(tmp_path / "imgs")
    lp = str(tmp_path / "labs")
    data.save_idx(images, labels, ip, lp)
    ds = data.load_idx(ip, lp)
    assert ds.x.shape == (7, 20)
    assert ds.image_shape == (5, 4)
    assert np.allclose(ds.x, images.reshape(7, 20) / 255.0)
    assert np.array_equal(ds.y, labels.astype(np.int64))
    assert ds.num_classes == int(labels.max()) + 1
    ds10 = data.load_idx(ip, lp, num_classes=10)
    assert ds10.num_classes == 10
    with pytest.raises(IngestionError, match="outside num_classes"):
        data.load_idx(ip, lp, num_classes=int(labels.max()))


def test_save_idx_validation(tmp_path):
    with pytest.raises(InputError):
        data.save_idx(np.zeros((2, 3), dtype=np.uint8),
                      np.zeros(2, dtype=np.uint8),
                      str(tmp_path / "i"), str(tmp_path / "l"))
    with pytest.raises(InputError):
        data.save_idx(np.zeros((2, 3, 3), dtype=np.uint8),
                      np.zeros(3, dtype=np.uint8),
                      str(tmp_path / "i"), str(tmp_path / "l"))


def test_load_idx_error_paths(tmp_path):
    ip = str(tmp_path / "imgs")
    lp = str(tmp_path / "labs")
    with pytest.raises(IngestionError, match="not found"):
        data.load_idx(ip, lp)
    data.save_idx(np.zeros((2, 2, 2), dtype=np.uint8),
                  np.zeros(2, dtype=np.uint8), ip, lp)
    bad_magic = str(tmp_path / "badmagic")
    with open(bad_magic, "wb") as f:
        f.write(b"\x00\x00\x00\x99" + b"\x00" * 12)
    with pytest.raises(IngestionError, match="bad image magic"):
        data.load_idx(bad_magic, lp)
    truncated = str(tmp_path / "short")
    with open(ip, "rb") as f:
        blob = f.read()
    with open(truncated, "wb") as f:
        f.write(blob[:-3])
    with pytest.raises(IngestionError, match="truncated"):
        data.load_idx(truncated, lp)
    lp3 = str(tmp_path / "labs3")
    data.save_idx(np.zeros((3, 2, 2), dtype=np.uint8),
                  np.zeros(3, dtype=np.uint8), str(tmp_path / "i3"), lp3)
    with pytest.raises(IngestionError, match="labels for"):
        data.load_idx(ip, lp3)
    with pytest.raises(IngestionError, match="bad label magic"):
        data.load_idx(ip, ip)


def test_digits_export_and_load(tmp_path):
    cache = str(tmp_path / "cache")
    ip, lp = data.export_digits_idx(cache)
    with open(ip, "rb") as f:
        first = f.read()
    # second call reuses the files unchanged
    ip2, _ = data.export_digits_idx(cache)
    assert ip2 == ip
    with open(ip, "rb") as f:
        assert f.read() == first
    ds = data.load_digits_dataset(cache)
    assert ds.x.shape == (1797, 64)
    assert ds.image_shape == (8, 8)
    assert ds.num_classes == 10
    assert float(ds.x.min()) >= 0.0 and float(ds.x.max()) <= 1.0
    assert set(np.unique(ds.y)) == set(range(10))


def test_make_blobs_layout_and_determinism():
    ds = data.make_blobs(5, 30, 8, Rng(11), separation=3.0, spread=0.6)
    assert ds.x.shape == (150, 8)
    assert np.array_equal(ds.y, np.repeat(np.arange(5), 30))
    assert ds.image_shape is None
    again = data.make_blobs(5, 30, 8, Rng(11), separation=3.0, spread=0.6)
    assert np.array_equal(ds.x, again.x)
    means = np.array([ds.x[ds.y == c].mean(axis=0) for c in range(5)])
    gaps = [np.linalg.norm(means[a] - means[b])
            for a in range(5) for b in range(a + 1, 5)]
    assert min(gaps) > 3.0  # clusters stay well separated at this seed
    with pytest.raises(InputError):
        data.make_blobs(1, 30, 8, Rng(0))
    with pytest.raises(InputError):
        data.make_blobs(3, 0, 8, Rng(0))


def test_class_pools():
    ds = id_dataset(3, 4)
    pools = data.class_pools(ds)
    assert [len(p) for p in pools] == [4, 4, 4]
    assert list(pools[1]) == [4, 5, 6, 7]


def test_partition_shards_are_consistent():
    ds = id_dataset(6, 20)
    shards = data.partition_pq(ds, 5, p=3, q=8, std=1, rng=Rng(2))
    assert [s.client_id for s in shards] == list(range(5))
    for s in shards:
        assert s.label_space == sorted(s.label_space)
        assert 1 <= len(s.label_space) <= 6
        assert set(np.unique(s.train_y)) == set(s.label_space)
        assert set(np.unique(s.test_y)) <= set(s.label_space)
        # feature doubles as sample id: test rows never leak into train
        train_ids = set(int(v) for v in s.train_x[:, 0])
        test_ids = set(int(v) for v in s.test_x[:, 0])
        assert not (train_ids & test_ids)
        for c in s.label_space:
            ids = [int(v) for v in s.train_x[s.train_y == c][:, 0]]
            assert all(ds.y[i] == c for i in ids)


def test_partition_determinism_and_zero_std():
    ds = id_dataset(6, 30)
    a = data.partition_pq(ds, 4, p=3, q=10, std=2, rng=Rng(9))
    b = data.partition_pq(ds, 4, p=3, q=10, std=2, rng=Rng(9))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.train_x, sb.train_x)
        assert np.array_equal(sa.test_x, sb.test_x)
        assert sa.label_space == sb.label_space
    # std 0 pins every client at exactly p classes and q train draws each
    for s in data.partition_pq(ds, 4, p=3, q=10, std=0, rng=Rng(9)):
        assert len(s.label_space) == 3
        assert len(s.train_y) == 30
        for c in s.label_space:
            assert int((s.train_y == c).sum()) == 10


def test_partition_draws_with_replacement_when_pool_is_small():
    ds = id_dataset(2, 6)
    shards = data.partition_pq(ds, 1, p=2, q=20, std=0, rng=Rng(3))
    s = shards[0]
    for c in s.label_space:
        rows = [int(v) for v in s.train_x[s.train_y == c][:, 0]]
        assert len(rows) == 20
        assert len(set(rows)) < 20  # forced repeats
        assert all(ds.y[i] == c for i in rows)


def test_partition_validation():
    ds = id_dataset(3, 10)
    with pytest.raises(PartitionError):
        data.partition_pq(ds, 0, 2, 5, 1, Rng(0))
    with pytest.raises(PartitionError):
        data.partition_pq(ds, 2, 0.5, 5, 1, Rng(0))
    with pytest.raises(PartitionError):
        data.partition_pq(ds, 2, 2, 0.5, 1, Rng(0))
    with pytest.raises(PartitionError):
        data.partition_pq(ds, 2, 2, 5, 1, Rng(0), test_fraction=1.0)
    thin = data.Dataset(np.zeros((3, 1)), np.array([0, 1, 1]), 2)
    with pytest.raises(PartitionError, match="class 0 has 1"):
        data.partition_pq(thin, 2, 1, 2, 0, Rng(0))
