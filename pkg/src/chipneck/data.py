"""CIFAR-100 binary reader/writer and a seeded synthetic image dataset."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from chipneck.engine import Precision
from chipneck.errors import ConfigError, FormatError

RECORD_BYTES = 3074  # coarse label, fine label, 3 x 32 x 32 pixel planes (R, G, B)
IMAGE_SHAPE = (3, 32, 32)
CIFAR100_CLASSES = 100
SPLIT_FILES = {"train": "train.bin", "test": "test.bin"}


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, h, w), values in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: int
    split: str = "train"
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return self.labels.shape[0]


def _to_unit(pixels: np.ndarray, precision) -> np.ndarray:
    dt = Precision(precision).dtype
    return pixels.astype(dt) / dt.type(255)


def load_cifar100(path, split: str = "train", precision=Precision.SINGLE) -> Dataset:
    """Parse the CIFAR-100 binary format; fine labels become ``Dataset.labels``.

    ``path`` is either a ``.bin`` file or the extracted ``cifar-100-binary``
    directory, in which case ``train.bin`` / ``test.bin`` is picked by split.
    """
    if split not in SPLIT_FILES:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    path = Path(path)
    if path.is_dir():
        path = path / SPLIT_FILES[split]
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-100 file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    size = raw.size
    n = size // RECORD_BYTES
    if size == 0 or size % RECORD_BYTES:
        expected = max(n, 1) * RECORD_BYTES
        raise FormatError(
            f"{path}: expected a multiple of {RECORD_BYTES} bytes (e.g. {expected} for {max(n, 1)} records), "
            f"got {size} bytes"
        )
    records = raw.reshape(n, RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    if fine.max() >= CIFAR100_CLASSES:
        bad = int(np.argmax(fine >= CIFAR100_CLASSES))
        raise FormatError(f"{path}: record {bad} has fine label {fine[bad]} >= {CIFAR100_CLASSES}")
    pixels = records[:, 2:].reshape(n, *IMAGE_SHAPE)
    return Dataset(_to_unit(pixels, precision), fine, CIFAR100_CLASSES, split, records[:, 0].astype(np.int64))


def encode_records(dataset: Dataset) -> bytes:
    if dataset.images.shape[1:] != IMAGE_SHAPE:
        raise FormatError(f"CIFAR records hold {IMAGE_SHAPE} images, got {dataset.images.shape[1:]}")
    if dataset.classes > 256 or (len(dataset) and dataset.labels.max() > 255):
        raise FormatError("labels must fit in one byte")
    n = len(dataset)
    pixels = np.rint(np.clip(dataset.images.astype(np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    coarse = dataset.coarse_labels if dataset.coarse_labels is not None else np.zeros(n, dtype=np.int64)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = coarse
    records[:, 1] = dataset.labels
    records[:, 2:] = pixels.reshape(n, -1)
    return records.tobytes()


def write_cifar100(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_records(dataset))
    return path


# ------------------------------------------------------------------ synthetic

DEFAULT_NOISE = 0.3


def class_patterns(seed: int, classes: int, h: int, w: int, bumps: int = 2) -> np.ndarray:
    """Mean image per class: a flat colour plus a few coloured Gaussian bumps."""
    rng = np.random.default_rng([seed, 0])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = max(h, w) / 4.0
    means = np.empty((classes, 3, h, w))
    for k in range(classes):
        img = np.broadcast_to(rng.uniform(0.3, 0.7, size=(3, 1, 1)), (3, h, w)).copy()
        for _ in range(bumps):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            amp = rng.uniform(-0.35, 0.35, size=(3, 1, 1))
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        means[k] = img
    return np.clip(means, 0.0, 1.0)


def synth_dataset(seed: int, n: int, classes: int = 20, h: int = 8, w: int = 8, split: str = "train",
                  noise: float = DEFAULT_NOISE, precision=Precision.SINGLE) -> Dataset:
    """Class-conditional Gaussian-noise images around per-class mean patterns.

    Class patterns depend on ``seed`` only; the noise and label order also
    depend on ``split``, so train and test draw fresh samples of the same
    classes.  Pixels are quantised to 8-bit levels like real image data.
    """
    if classes < 2 or n < classes:
        raise ConfigError(f"need classes >= 2 and n >= classes, got n={n}, classes={classes}")
    if split not in SPLIT_FILES:
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    means = class_patterns(seed, classes, h, w)
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = means[labels] + noise * rng.standard_normal((n, 3, h, w))
    pixels = np.rint(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8)
    return Dataset(_to_unit(pixels, precision), labels, classes, split)


def batch_indices(n: int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch_size must lie in 1..{n}, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(images, labels)`` batches for one epoch; the last may be short."""
    for idx in batch_indices(len(dataset), batch_size, seed, epoch):
        yield dataset.images[idx], dataset.labels[idx]


def resolve_split_path(path: str | os.PathLike, split: str) -> Path:
    p = Path(path)
    return p / SPLIT_FILES[split] if p.is_dir() else p
