"""
Dataset loading (IDX, CIFAR-10 binary, synthetic blobs), deterministic
stratified splits, and batching.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from modules.config import get_dtype
from modules.errors import DataError, DataFormatError, TruncatedFileError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10

ROLES = ("train", "subval", "test", "recalib")


@dataclass(frozen=True)
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    role: str
    class_count: int
    indices: np.ndarray = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"unknown split role {self.role!r}")
        if len(self.images) == 0:
            raise DataError(f"{self.role} split is empty")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.labels)))

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, idx, role=None):
        idx = np.asarray(idx, dtype=np.intp)
        return DatasetSplit(
            images=self.images[idx],
            labels=self.labels[idx],
            role=role or self.role,
            class_count=self.class_count,
            indices=self.indices[idx],
        )


def normalize(pixels, mean, std, dtype=None):
    """uint8 N,C,H,W -> [0,1] -> per-channel standardized floats."""
    dtype = dtype or get_dtype()
    x = pixels.astype(dtype) / dtype(255.0)
    c = x.shape[1]
    mean = np.asarray(mean, dtype=dtype)
    std = np.asarray(std, dtype=dtype)
    if mean.size == 1:
        mean, std = np.repeat(mean, c), np.repeat(std, c)
    if mean.size != c:
        raise DataError(f"normalization has {mean.size} channels, images have {c}")
    return (x - mean.reshape(1, c, 1, 1)) / std.reshape(1, c, 1, 1)


# ---------------------------------------------------------------------------
# IDX (MNIST-style)
# ---------------------------------------------------------------------------
def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    return path.read_bytes()


def _idx_header(raw, path, magic, dims):
    header_len = 4 + 4 * dims
    if len(raw) < header_len:
        raise TruncatedFileError(path, header_len, len(raw))
    got = int.from_bytes(raw[0:4], "big")
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    sizes = [int.from_bytes(raw[4 + 4 * d: 8 + 4 * d], "big") for d in range(dims)]
    return header_len, sizes


def read_idx_images(path):
    raw = _read_bytes(path)
    offset, (n, h, w) = _idx_header(raw, path, IDX_IMAGES_MAGIC, 3)
    expected = offset + n * h * w
    if len(raw) < expected:
        raise TruncatedFileError(path, expected, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=offset).reshape(n, 1, h, w)


def read_idx_labels(path):
    raw = _read_bytes(path)
    offset, (n,) = _idx_header(raw, path, IDX_LABELS_MAGIC, 1)
    expected = offset + n
    if len(raw) < expected:
        raise TruncatedFileError(path, expected, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).astype(np.int64)


def load_idx(images_path, labels_path, mean, std, class_count=10, role="train"):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    if labels.size and labels.max() >= class_count:
        raise DataFormatError(f"{labels_path}: label {labels.max()} >= class count {class_count}")
    logger.info("loaded %d IDX images of shape %s from %s", len(images), images.shape[1:], images_path)
    return DatasetSplit(normalize(images, mean, std), labels, role, class_count)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------
def load_cifar_binary(paths, mean, std, role="train"):
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        lab = records[:, 0].astype(np.int64)
        if lab.max() >= CIFAR_CLASSES:
            raise DataFormatError(f"{path}: label {lab.max()} >= {CIFAR_CLASSES}")
        labels.append(lab)
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DataError("no CIFAR-10 batch files given")
    pixels = np.concatenate(images)
    logger.info("loaded %d CIFAR-10 images from %d files", len(pixels), len(paths))
    return DatasetSplit(normalize(pixels, mean, std), np.concatenate(labels), role, CIFAR_CLASSES)


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------
def synth_blobs(class_count, per_class, image_size, seed, channels=1, role="train", noise=0.3):
    """Each class is a Gaussian bump at its own position plus pixel noise.

    Deterministic: identical arguments give identical arrays.
    """
    if min(class_count, per_class, image_size, channels) < 1:
        raise DataError("synth_blobs sizes must be positive")
    dtype = get_dtype()
    rng = np.random.default_rng(seed)
    # class centres evenly spaced on a ring around the image centre
    angles = 2 * np.pi * np.arange(class_count) / class_count
    radius = image_size / 4
    mid = (image_size - 1) / 2
    centres = np.stack([mid + radius * np.sin(angles), mid + radius * np.cos(angles)], axis=1)
    width = max(image_size / 8, 1.0)

    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = np.empty((class_count * per_class, channels, image_size, image_size), dtype=dtype)
    labels = np.repeat(np.arange(class_count), per_class)
    for k in range(class_count):
        jitter = rng.normal(0, width / 4, size=(per_class, 2))
        cy = centres[k, 0] + jitter[:, 0, None, None]
        cx = centres[k, 1] + jitter[:, 1, None, None]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        block = bump[:, None] + rng.normal(0, noise, size=(per_class, channels, image_size, image_size))
        images[k * per_class:(k + 1) * per_class] = block.astype(dtype)
    return DatasetSplit(images, labels.astype(np.int64), role, class_count)


# ---------------------------------------------------------------------------
# Splits and batching
# ---------------------------------------------------------------------------
def _stratified_pick(labels, fraction, rng, class_count):
    picked = []
    for c in range(class_count):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        n = int(np.floor(fraction * members.size))
        if n == 0 or n == members.size:
            raise DataError(
                f"fraction {fraction} is too large or too small to stratify class {c} "
                f"({members.size} items)"
            )
        picked.append(rng.choice(members, size=n, replace=False))
    return np.sort(np.concatenate(picked))


def make_splits(train, subval_fraction, recalib_fraction, seed):
    """Disjoint stratified subval plus a recalibration subset drawn from the rest.

    The recalibration size is recalib_fraction of the whole training set.
    """
    if subval_fraction + recalib_fraction >= 1:
        raise DataError("subval_fraction + recalib_fraction must be < 1")
    rng = np.random.default_rng(seed)
    sub_idx = _stratified_pick(train.labels, subval_fraction, rng, train.class_count)
    rest_idx = np.setdiff1d(np.arange(len(train)), sub_idx)

    n_recalib = int(round(recalib_fraction * len(train)))
    if n_recalib < 1:
        raise DataError(f"recalib_fraction {recalib_fraction} selects no items from {len(train)}")
    n_recalib = min(n_recalib, rest_idx.size)
    recalib_idx = np.sort(rng.choice(rest_idx, size=n_recalib, replace=False))

    return {
        "train": train.take(rest_idx, role="train"),
        "subval": train.take(sub_idx, role="subval"),
        "recalib": train.take(recalib_idx, role="recalib"),
    }


def subset(split, count, seed):
    """Stratified subsample of exactly `count` items.

    Each class gets the floor of its proportional share; the leftover items go
    to the classes with the largest remainders, lower class ids first on ties.
    """
    if count >= len(split):
        return split
    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(split.labels == c) for c in range(split.class_count)]
    quota = np.array([m.size for m in members]) * count / len(split)
    take = np.floor(quota).astype(int)
    order = np.argsort(take - quota, kind="stable")
    take[order[:count - take.sum()]] += 1
    picked = [rng.choice(m, size=n, replace=False) for m, n in zip(members, take) if n]
    return split.take(np.sort(np.concatenate(picked)))


def iterate_batches(split, batch_size, seed=None, shuffle=False, hflip=False):
    """Yield (images, labels); shuffle order and flips are seeded per consumer."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(split)) if shuffle else np.arange(len(split))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        images = split.images[idx]
        if hflip:
            flip = rng.random(len(idx)) < 0.5
            images = images.copy()
            images[flip] = images[flip][..., ::-1]
        yield images, split.labels[idx]


def load_dataset(cfg):
    """Return (train, test or None) for a DatasetConfig."""
    if cfg.kind == "blobs":
        train = synth_blobs(cfg.blob_classes, cfg.blob_per_class, cfg.blob_image_size,
                            cfg.seed, cfg.blob_channels, role="train")
        test = synth_blobs(cfg.blob_classes, cfg.blob_test_per_class, cfg.blob_image_size,
                           cfg.seed + 1, cfg.blob_channels, role="test")
    elif cfg.kind == "mnist":
        if not cfg.train_images or not cfg.train_labels:
            raise DataError("mnist dataset needs train_images and train_labels paths")
        train = load_idx(cfg.train_images, cfg.train_labels, cfg.mean, cfg.std, role="train")
        test = None
        if cfg.test_images and cfg.test_labels:
            test = load_idx(cfg.test_images, cfg.test_labels, cfg.mean, cfg.std, role="test")
    elif cfg.kind == "cifar10":
        if not cfg.cifar_train:
            raise DataError("cifar10 dataset needs cifar_train paths")
        train = load_cifar_binary(cfg.cifar_train, cfg.mean, cfg.std, role="train")
        test = load_cifar_binary(cfg.cifar_test, cfg.mean, cfg.std, role="test") if cfg.cifar_test else None
    else:
        raise DataError(f"unknown dataset kind {cfg.kind!r}")

    if cfg.train_subset:
        train = subset(train, cfg.train_subset, cfg.seed)
    return train, test
