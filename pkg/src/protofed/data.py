"""Datasets and client partitioning.

Three dataset sources: IDX image/label file pairs, the bundled handwritten
digits (exported once to IDX and re-read through the same loader), and
synthetic Gaussian blobs. Partitioning follows the p/q scheme: each client
draws its class count and per-class sample count from normal distributions
around p and q.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IngestionError, InputError, PartitionError
from .rng import Rng

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # (n, d) float64 features
    y: np.ndarray  # (n,) int64 labels
    num_classes: int
    image_shape: tuple | None = None  # (rows, cols) when x came from images


@dataclass
class ClientData:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    label_space: list  # sorted class ids this client holds


def round_half_up(x: float) -> int:
    """Round with ties away from zero toward +inf (3.5 -> 4, 2.5 -> 3)."""
    return int(math.floor(x + 0.5))


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IngestionError("%s: truncated while reading %s" % (path, what))
    return buf


def _read_u32(f, path: str, what: str) -> int:
    return struct.unpack(">I", _read_exact(f, 4, path, what))[0]


def load_idx(images_path: str, labels_path: str, num_classes=None) -> Dataset:
    """Load a big-endian IDX image/label pair, scaling pixels to [0, 1]."""
    if not os.path.exists(images_path):
        raise IngestionError("%s: image file not found" % images_path)
    if not os.path.exists(labels_path):
        raise IngestionError("%s: label file not found" % labels_path)
    with open(images_path, "rb") as f:
        magic = _read_u32(f, images_path, "magic")
        if magic != IDX_MAGIC_IMAGES:
            raise IngestionError(
                "%s: bad image magic 0x%08x, expected 0x%08x"
                % (images_path, magic, IDX_MAGIC_IMAGES)
            )
        n = _read_u32(f, images_path, "image count")
        rows = _read_u32(f, images_path, "row count")
        cols = _read_u32(f, images_path, "column count")
        raw = _read_exact(f, n * rows * cols, images_path, "pixel data")
    with open(labels_path, "rb") as f:
        magic = _read_u32(f, labels_path, "magic")
        if magic != IDX_MAGIC_LABELS:
            raise IngestionError(
                "%s: bad label magic 0x%08x, expected 0x%08x"
                % (labels_path, magic, IDX_MAGIC_LABELS)
            )
        n_labels = _read_u32(f, labels_path, "label count")
        if n_labels != n:
            raise IngestionError(
                "%s: %d labels for %d images in %s"
                % (labels_path, n_labels, n, images_path)
            )
        raw_labels = _read_exact(f, n_labels, labels_path, "label data")
    x = np.frombuffer(raw, dtype=np.uint8).astype(np.float64).reshape(n, rows * cols)
    x /= 255.0
    y = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if n else 0
    elif y.size and int(y.max()) >= num_classes:
        raise IngestionError(
            "%s: label %d outside num_classes=%d" % (labels_path, int(y.max()), num_classes)
        )
    return Dataset(x, y, num_classes, image_shape=(rows, cols))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path: str,
             labels_path: str) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise InputError("images must be (n, rows, cols) with matching labels (n,)")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        f.write(labels.tobytes())


def export_digits_idx(out_dir: str) -> tuple:
    """Export the bundled 8x8 handwritten digits as an IDX pair.

    Returns (images_path, labels_path). Files are only written when absent;
    the export is deterministic so re-creating them yields identical bytes.
    """
    images_path = os.path.join(out_dir, "digits-images-idx3-ubyte")
    labels_path = os.path.join(out_dir, "digits-labels-idx1-ubyte")
    if os.path.exists(images_path) and os.path.exists(labels_path):
        return images_path, labels_path
    from sklearn.datasets import load_digits

    bunch = load_digits()
    # pixels arrive in 0..16, rescale onto the 0..255 byte range
    images = np.round(bunch.images / 16.0 * 255.0).astype(np.uint8)
    labels = bunch.target.astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    save_idx(images, labels, images_path, labels_path)
    return images_path, labels_path


def load_digits_dataset(cache_dir: str) -> Dataset:
    """Digits as a Dataset, routed through the IDX loader."""
    images_path, labels_path = export_digits_idx(cache_dir)
    return load_idx(images_path, labels_path, num_classes=10)


def make_blobs(num_classes: int, per_class: int, dim: int, rng: Rng,
               separation: float = 3.0, spread: float = 0.6) -> Dataset:
    """Isotropic Gaussian blobs, one cluster per class.

    Cluster centres are drawn from N(0, separation^2) per coordinate and
    points scatter around them with N(0, spread^2).
    """
    if num_classes < 2 or per_class < 1 or dim < 1:
        raise InputError("need num_classes >= 2, per_class >= 1, dim >= 1")
    centers = np.array(
        [[rng.normal(0.0, separation) for _ in range(dim)] for _ in range(num_classes)]
    )
    n = num_classes * per_class
    x = np.empty((n, dim))
    y = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(num_classes):
        for _ in range(per_class):
            for d in range(dim):
                x[i, d] = centers[c, d] + rng.normal(0.0, spread)
            y[i] = c
            i += 1
    return Dataset(x, y, num_classes, image_shape=None)


def class_pools(dataset: Dataset) -> list:
    """Index arrays per class, ascending class id."""
    return [np.nonzero(dataset.y == c)[0] for c in range(dataset.num_classes)]


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, v))


def _draw_counted(pool: list, count: int, rng: Rng) -> list:
    """count draws from pool: distinct while possible, then with replacement."""
    if count <= len(pool):
        return rng.choose(pool, count)
    out = list(pool)
    rng.shuffle(out)
    for _ in range(count - len(pool)):
        out.append(pool[rng.next_below(len(pool))])
    return out


def partition_pq(dataset: Dataset, num_clients: int, p: float, q: float,
                 std: float, rng: Rng, test_fraction: float = 0.25) -> list:
    """Build per-client shards under the p/q partitioning scheme.

    Each client samples its class count from N(p, std) and its per-class
    train count from N(q, std), both rounded and clamped. Per chosen class
    the client also receives held-out test samples, disjoint from its own
    train samples.
    """
    if num_clients < 1:
        raise PartitionError("need at least one client")
    if not (0.0 < test_fraction < 1.0):
        raise PartitionError("test_fraction must be in (0, 1)")
    if p < 1 or q < 1:
        raise PartitionError("p and q must be >= 1")
    pools = class_pools(dataset)
    for c, pool in enumerate(pools):
        if len(pool) < 2:
            raise PartitionError("class %d has %d samples, need at least 2" % (c, len(pool)))
    clients = []
    for client_id in range(num_clients):
        p_c = _clamp(round_half_up(rng.normal(p, std)), 1, dataset.num_classes)
        q_c = max(1, round_half_up(rng.normal(q, std)))
        label_space = sorted(rng.choose(list(range(dataset.num_classes)), p_c))
        train_idx = []
        test_idx = []
        for c in label_space:
            pool = list(pools[c])
            n_test = max(1, round_half_up(q_c * test_fraction))
            n_test = min(n_test, len(pool) - 1)  # keep at least one train candidate
            picked_test = rng.choose(pool, n_test)
            test_idx.extend(picked_test)
            taken = set(picked_test)
            remaining = [i for i in pool if i not in taken]
            train_idx.extend(_draw_counted(remaining, q_c, rng))
        train_idx = np.array(train_idx, dtype=np.int64)
        test_idx = np.array(test_idx, dtype=np.int64)
        clients.append(ClientData(
            client_id=client_id,
            train_x=dataset.x[train_idx].copy(),
            train_y=dataset.y[train_idx].copy(),
            test_x=dataset.x[test_idx].copy(),
            test_y=dataset.y[test_idx].copy(),
            label_space=label_space,
        ))
    return clients
