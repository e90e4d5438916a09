"""Dataset loading, vertical column partitioning, and aligned batch order.

All parties must iterate the same sample rows in the same order; the batch
schedule is a pure function of (seed, epoch) so no coordination messages are
needed for alignment.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # N x F float64
    labels: np.ndarray  # N int64, each < n_classes
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be N x F and labels N")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels out of range for {self.n_classes} classes")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class FeatureShard:
    owner: int  # party index, 0 = active
    lo: int
    hi: int


def shard_ranges(n_features: int, n_parties: int) -> list[FeatureShard]:
    """Contiguous equal-width column ranges; remainder columns go to the last shard."""
    if n_features < n_parties:
        raise ValueError(f"cannot split {n_features} columns across {n_parties} parties")
    width = n_features // n_parties
    shards = []
    for k in range(n_parties):
        lo = k * width
        hi = n_features if k == n_parties - 1 else lo + width
        shards.append(FeatureShard(owner=k, lo=lo, hi=hi))
    return shards


def vertical_split(dataset: Dataset, n_parties: int):
    """Split columns across parties; party 0 keeps shard 0 and all labels.

    Returns (list of N x width arrays ordered by party, labels).
    """
    ranges = shard_ranges(dataset.n_features, n_parties)
    shards = [dataset.features[:, r.lo : r.hi] for r in ranges]
    return shards, dataset.labels


# ---------------------------------------------------------------------------
# IDX binary format (big-endian, as used by the classic digit benchmarks)
# ---------------------------------------------------------------------------


def load_idx(images_path: str, labels_path: str, limit: int | None = None) -> Dataset:
    """Read an IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise ValueError(f"{images_path}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise ValueError(
                f"{images_path}: header promises {count} images but file holds "
                f"{len(raw) // (rows * cols)} complete records"
            )
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) < 8:
            raise ValueError(f"{labels_path}: truncated header")
        magic, lcount = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        lraw = f.read(lcount)
        if len(lraw) != lcount:
            raise ValueError(f"{labels_path}: header promises {lcount} labels, got {len(lraw)}")
    if count != lcount:
        raise ValueError(f"{count} images vs {lcount} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, n_classes)


def write_idx(dataset: Dataset, images_path: str, labels_path: str, rows: int, cols: int):
    """Write a dataset as an IDX pair; features must be [0, 1] pixel intensities."""
    if rows * cols != dataset.n_features:
        raise ValueError(f"{rows}x{cols} grid does not hold {dataset.n_features} features")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, dataset.n_samples, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, dataset.n_samples))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CSV (label in last column, header row optional)
# ---------------------------------------------------------------------------


def load_csv(path: str) -> Dataset:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        for i, row in enumerate(reader):
            if not row:
                continue
            if i == 0:
                try:
                    [float(v) for v in row]
                except ValueError:
                    continue  # header row
            rows.append([float(v) for v in row])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)
    features, labels = arr[:, :-1], arr[:, -1].astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1)


def write_csv(dataset: Dataset, path: str, header: bool = True):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        if header:
            writer.writerow([f"f{i}" for i in range(dataset.n_features)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------


def synth_blobs(n: int, n_classes: int, n_features: int, spread: float, seed: int, scale: float = 2.3) -> Dataset:
    """Gaussian blobs around class means placed on a randomly rotated simplex.

    The rotation spreads every class direction across all feature columns, so
    a party holding a contiguous column slice sees only part of the class
    separation.  ``spread`` is the per-coordinate noise standard deviation.
    """
    if n < n_classes:
        raise ValueError(f"need at least {n_classes} samples for {n_classes} classes")
    if n_features < n_classes:
        raise ValueError(f"need at least {n_classes} features to place a {n_classes}-point simplex")
    rng = np.random.default_rng(seed)
    # regular simplex with unit circumradius, centered at the origin
    verts = np.eye(n_classes) - 1.0 / n_classes
    verts /= np.linalg.norm(verts[0])
    means = np.zeros((n_classes, n_features))
    means[:, :n_classes] = verts * scale
    q, _ = np.linalg.qr(rng.standard_normal((n_features, n_features)))
    means = means @ q.T
    labels = np.arange(n) % n_classes
    labels = rng.permutation(labels)
    features = means[labels] + spread * rng.standard_normal((n, n_features))
    return Dataset(features, labels, n_classes)


# ---------------------------------------------------------------------------
# Aligned batch schedule
# ---------------------------------------------------------------------------


def batch_iter(n: int, batch_size: int, epoch: int, seed: int) -> list[np.ndarray]:
    """Deterministic per-epoch permutation of 0..n split into batches.

    Every party evaluates this with the same (seed, epoch) and therefore
    consumes sample rows in the identical order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, epoch])
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
