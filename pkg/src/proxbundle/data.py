"""Dataset generation and ingestion.

Synthetic union-of-subspaces features, synthetic geometric-pattern image
classification tasks, an IDX-format image loader, and seeded batching.
All randomness flows through the package's seeded generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError
from .rng import Rng

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class LabeledFeatures:
    """Feature columns (d x m) with one integer class label per column."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.features.ndim != 2:
            raise UsageError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape[0] != self.features.shape[1]:
            raise UsageError(
                f"{self.labels.shape[0]} labels for {self.features.shape[1]} feature columns"
            )

    @property
    def num_samples(self) -> int:
        return self.features.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_columns(self, cls: int) -> np.ndarray:
        cols = self.features[:, self.labels == cls]
        if cols.shape[1] == 0:
            raise UsageError(f"class {cls} has no samples")
        return cols


@dataclass(frozen=True)
class SubspaceSpec:
    ambient_dim: int
    subspace_dim: int
    classes: int
    samples_per_class: int
    noise: float
    seed: int

    def __post_init__(self):
        if self.subspace_dim >= self.ambient_dim:
            raise UsageError(
                f"subspace dim {self.subspace_dim} must be < ambient dim {self.ambient_dim}"
            )


@dataclass(frozen=True)
class SyntheticImageSpec:
    image_size: int = 16
    classes: int = 3
    samples_per_class: int = 40
    noise: float = 0.0
    seed: int = 0


@dataclass
class DatasetSplit:
    """Images (N, H, W) or feature rows, integer labels, and a train/test partition."""

    samples: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        n = self.labels.shape[0]
        if self.samples.shape[0] != n:
            raise UsageError(f"{self.samples.shape[0]} samples for {n} labels")
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != n or len(both) != n:
            raise UsageError("train/test partition must be disjoint and covering")

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_idx if name == "train" else self.test_idx
        return self.samples[idx], self.labels[idx]


def gen_subspaces(spec: SubspaceSpec) -> LabeledFeatures:
    """Samples from c independent r-dimensional subspaces of R^d.

    Each sample is B_c @ alpha + noise with alpha uniform on the unit sphere
    of R^r; bases are orthonormalized gaussian draws.
    """
    rng = Rng(spec.seed)
    d, r = spec.ambient_dim, spec.subspace_dim
    cols = []
    labels = []
    for c in range(spec.classes):
        crng = rng.child(("class", c))
        basis, _ = np.linalg.qr(crng.normal(d, r))
        for _ in range(spec.samples_per_class):
            alpha = crng.normal(r)
            alpha /= np.linalg.norm(alpha)
            x = basis @ alpha
            if spec.noise > 0:
                x = x + spec.noise * crng.normal(d)
            cols.append(x)
            labels.append(c)
    return LabeledFeatures(np.stack(cols, axis=1), np.array(labels))


# jitter window of 2 keeps the zero-noise task exactly nearest-centroid
# separable; wider windows smear the class centroids into each other
_JITTER = 2


def _render_pattern(kind: int, size: int, rng: Rng) -> np.ndarray:
    """Deterministic geometric pattern with a small jittered placement."""
    img = np.zeros((size, size))
    base = size // 2 - _JITTER // 2
    if kind % 4 == 0:  # horizontal bar, thickness 2
        row = base + rng.integer(_JITTER)
        img[row : row + 2, 1 : size - 1] = 1.0
    elif kind % 4 == 1:  # cross
        cx = base + rng.integer(_JITTER)
        cy = base + rng.integer(_JITTER)
        arm = size // 4
        img[cx - 1 : cx + 1, cy - arm : cy + arm] = 1.0
        img[cx - arm : cx + arm, cy - 1 : cy + 1] = 1.0
    elif kind % 4 == 2:  # filled blob
        cx = base + rng.integer(_JITTER)
        cy = base + rng.integer(_JITTER)
        rad = max(2, size // 5)
        yy, xx = np.mgrid[0:size, 0:size]
        img[(yy - cx) ** 2 + (xx - cy) ** 2 <= rad * rad] = 1.0
    else:  # vertical bar, thickness 2
        col = base + rng.integer(_JITTER)
        img[1 : size - 1, col : col + 2] = 1.0
    return img


def gen_images(spec: SyntheticImageSpec) -> DatasetSplit:
    """Pattern-classification images with optional gaussian pixel noise.

    Deterministic per seed; stratified 80/20 train/test split so every class
    appears in both partitions.
    """
    rng = Rng(spec.seed)
    n = spec.classes * spec.samples_per_class
    images = np.empty((n, spec.image_size, spec.image_size))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(spec.classes):
        crng = rng.child(("images", c))
        for _ in range(spec.samples_per_class):
            img = _render_pattern(c, spec.image_size, crng)
            if spec.noise > 0:
                img = img + spec.noise * crng.normal(spec.image_size, spec.image_size)
            images[i] = img
            labels[i] = c
            i += 1
    train_idx, test_idx = _stratified_split(labels, 0.8, rng.child("split"))
    return DatasetSplit(images, labels, train_idx, test_idx)


def _stratified_split(labels: np.ndarray, train_fraction: float, rng: Rng):
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = max(1, min(len(idx) - 1, int(round(train_fraction * len(idx)))))
        train.extend(idx[:cut])
        test.extend(idx[cut:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def load_idx(images_path, labels_path, *, seed: int = 0, train_fraction: float = 0.8) -> DatasetSplit:
    """Read IDX image/label files (big-endian) and build a stratified split.

    Pixels are scaled to [0, 1].  Malformed files raise FormatError naming
    the byte offset.
    """
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    train_idx, test_idx = _stratified_split(labels, train_fraction, Rng(seed).child("idx-split"))
    return DatasetSplit(images, labels, train_idx, test_idx)


def _read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IDX_MAGIC_IMAGES:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08X} at offset 0, expected 0x{IDX_MAGIC_IMAGES:08X}"
        )
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload ends at offset {len(data)}, expected {expected} bytes"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)
    return pixels.astype(np.float64) / 255.0


def _read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    magic, count = struct.unpack_from(">II", data, 0)
    if magic != IDX_MAGIC_LABELS:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08X} at offset 0, expected 0x{IDX_MAGIC_LABELS:08X}"
        )
    if len(data) != 8 + count:
        raise FormatError(
            f"{path}: payload ends at offset {len(data)}, expected {8 + count} bytes"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write images in [0, 1] and integer labels as IDX files."""
    imgs = np.asarray(images)
    if imgs.ndim != 3:
        raise UsageError(f"images must be (N, H, W), got shape {imgs.shape}")
    pixels = np.clip(np.round(imgs * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols))
        fh.write(pixels.tobytes())
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if lab.shape[0] != n:
        raise UsageError(f"{lab.shape[0]} labels for {n} images")
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        fh.write(lab.astype(np.uint8).tobytes())


def batch_indices(n: int, batch_size: int, rng: Rng, min_batch: int = 1) -> list[np.ndarray]:
    """Seeded shuffle of ``n`` indices cut into batches.

    A final batch smaller than ``min_batch`` is merged into the previous one
    (self-expression needs at least 2 samples per batch).
    """
    if batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {batch_size}")
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_batch:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def batches(split: DatasetSplit, batch_size: int, seed: int, *, part: str = "train",
            epoch: int = 0, min_batch: int = 1):
    """Spec surface over ``batch_indices``: yields (samples, labels) pairs."""
    samples, labels = split.part(part)
    rng = Rng(seed).child(("shuffle", part, epoch))
    for idx in batch_indices(len(labels), batch_size, rng, min_batch=min_batch):
        yield samples[idx], labels[idx]


def nearest_centroid_accuracy(split: DatasetSplit) -> float:
    """Train-centroid classifier accuracy on the test part (oracle baseline)."""
    xtr, ytr = split.part("train")
    xte, yte = split.part("test")
    xtr = xtr.reshape(len(ytr), -1)
    xte = xte.reshape(len(yte), -1)
    classes = np.unique(ytr)
    centroids = np.stack([xtr[ytr == c].mean(axis=0) for c in classes])
    d2 = ((xte[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == yte))
