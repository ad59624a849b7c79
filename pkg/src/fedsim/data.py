"""Dataset ingestion and federated partitioning into shards.

Supports the big-endian IDX binary format (MNIST-style) and a synthetic
Gaussian-blob generator; shards come from a per-shard Dirichlet draw over
class proportions or from a single-class split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, FormatError, PartitionError
from .rng import stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.inputs) != len(self.labels) or len(self.inputs) < 1:
            raise ConsistencyError("inputs and labels must align and be nonempty")
        if self.labels.max() >= self.num_classes:
            raise ConsistencyError("label id exceeds num_classes")


@dataclass
class ShardDataset:
    """One client's data; before splitting, everything sits in the train part."""

    shard_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray = field(default_factory=lambda: np.empty((0, 0), np.float32))
    test_y: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    num_classes: int = 0

    @property
    def size(self) -> int:
        return len(self.train_y) + len(self.test_y)

    @property
    def label_histogram(self) -> np.ndarray:
        counts = np.bincount(self.train_y, minlength=self.num_classes)
        if len(self.test_y):
            counts = counts + np.bincount(self.test_y, minlength=self.num_classes)
        return counts


def _read_idx_header(raw: bytes, path, expected_magic: int, ndims: int):
    need = 4 * (1 + ndims)
    if len(raw) < need:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack_from(f">{ndims}I", raw, 4)
    return dims, need


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair; pixels scale to [0, 1] via 1/255."""
    with open(images_path, "rb") as fh:
        img_raw = fh.read()
    with open(labels_path, "rb") as fh:
        lab_raw = fh.read()
    (n_img, rows, cols), off = _read_idx_header(img_raw, images_path,
                                                IDX_IMAGES_MAGIC, 3)
    (n_lab,), lab_off = _read_idx_header(lab_raw, labels_path,
                                         IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise ConsistencyError(
            f"image file has {n_img} items but label file has {n_lab}"
        )
    npix = n_img * rows * cols
    if len(img_raw) - off != npix:
        raise FormatError(f"{images_path}: expected {npix} pixel bytes, "
                          f"found {len(img_raw) - off}")
    if len(lab_raw) - lab_off != n_lab:
        raise FormatError(f"{labels_path}: expected {n_lab} label bytes")
    pixels = np.frombuffer(img_raw, np.uint8, count=npix, offset=off)
    x = (pixels.reshape(n_img, rows * cols).astype(np.float32) / 255.0)
    y = np.frombuffer(lab_raw, np.uint8, count=n_lab, offset=lab_off).astype(np.int64)
    return Dataset(inputs=x, labels=y, num_classes=int(y.max()) + 1)


def synth_classification(seed: int, n_per_class: int, d: int, num_classes: int,
                         class_separation: float) -> Dataset:
    """Gaussian blobs with (near-)orthogonal class means, rescaled to [0, 1].

    Means sit class_separation apart from the origin along random orthogonal
    directions with unit within-class variance, so a linear model separates
    the classes comfortably once the separation clears a few noise sigmas.
    """
    if n_per_class < 1 or d < 1 or num_classes < 1:
        raise ValueError("all counts must be >= 1")
    rng = stream(seed, 0, 0, "synth")
    if d >= num_classes:
        q, _ = np.linalg.qr(rng.normal(size=(d, num_classes)))
        dirs = q.T[:num_classes]
    else:
        dirs = rng.normal(size=(num_classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = class_separation * dirs
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    x = means[labels] + rng.normal(size=(labels.size, d))
    lo, hi = x.min(), x.max()
    if hi > lo:
        x = (x - lo) / (hi - lo)
    else:
        x = np.zeros_like(x)
    return Dataset(inputs=x.astype(np.float32), labels=labels,
                   num_classes=num_classes)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation proportional to weights, summing exactly to total."""
    ideal = weights * total
    counts = np.floor(ideal).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        frac = ideal - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(dataset: Dataset, num_shards: int, alpha: float,
                        seed: int, max_retries: int = 100) -> list[ShardDataset]:
    """Non-iid partition: one Dirichlet(alpha) draw over classes per shard.

    Every example lands in exactly one shard; draws producing an empty shard
    are retried up to max_retries times.
    """
    if num_shards < 1:
        raise PartitionError("need at least one shard")
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    rng = stream(seed, 0, 0, "partition")
    class_indices = [np.flatnonzero(dataset.labels == c)
                     for c in range(dataset.num_classes)]
    for _ in range(max_retries):
        props = rng.dirichlet(np.full(dataset.num_classes, alpha), size=num_shards)
        assign = np.empty(len(dataset.labels), np.int64)
        for c, idx in enumerate(class_indices):
            if len(idx) == 0:
                continue
            shuffled = rng.permutation(idx)
            col = props[:, c]
            counts = _largest_remainder(col / col.sum(), len(idx))
            stops = np.cumsum(counts)
            starts = stops - counts
            for s in range(num_shards):
                assign[shuffled[starts[s]: stops[s]]] = s
        sizes = np.bincount(assign, minlength=num_shards)
        if np.all(sizes > 0):
            return _build_shards(dataset, assign, num_shards)
    raise PartitionError(
        f"could not fill all {num_shards} shards after {max_retries} draws; "
        "increase alpha or reduce the shard count"
    )


def partition_single_class(dataset: Dataset, num_shards: int) -> list[ShardDataset]:
    """Shard i holds only class (i mod num_classes); classes split evenly."""
    c = dataset.num_classes
    if num_shards % c != 0:
        raise PartitionError(
            f"num_shards={num_shards} must be divisible by num_classes={c}"
        )
    per_class = num_shards // c
    assign = np.empty(len(dataset.labels), np.int64)
    for cls in range(c):
        idx = np.flatnonzero(dataset.labels == cls)
        for k, chunk in enumerate(np.array_split(idx, per_class)):
            assign[chunk] = k * c + cls
    return _build_shards(dataset, assign, num_shards)


def _build_shards(dataset: Dataset, assign: np.ndarray,
                  num_shards: int) -> list[ShardDataset]:
    shards = []
    for s in range(num_shards):
        idx = np.flatnonzero(assign == s)
        shards.append(ShardDataset(
            shard_id=s,
            train_x=dataset.inputs[idx],
            train_y=dataset.labels[idx],
            num_classes=dataset.num_classes,
        ))
    return shards


def split_train_test(shard: ShardDataset, test_fraction: float,
                     seed: int) -> ShardDataset:
    """Disjoint seeded split; the test side receives ceil(fraction * size)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly inside (0, 1)")
    n = len(shard.train_y)
    if n < 2:
        raise PartitionError(f"shard {shard.shard_id} too small to split ({n})")
    n_test = int(np.ceil(test_fraction * n))
    if n - n_test < 1:
        raise PartitionError(
            f"shard {shard.shard_id}: split leaves no training examples"
        )
    rng = stream(seed, 0, shard.shard_id, "split")
    order = rng.permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    return ShardDataset(
        shard_id=shard.shard_id,
        train_x=shard.train_x[train_idx],
        train_y=shard.train_y[train_idx],
        test_x=shard.train_x[test_idx],
        test_y=shard.train_y[test_idx],
        num_classes=shard.num_classes,
    )
