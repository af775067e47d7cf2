"""CIFAR-10 binary batches, augmentation and stratified subsets.

A batch file is a sequence of 3073-byte records: one label byte in [0, 9]
followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue, each a
row-major 32x32 plane).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .tensor import Tensor

IMAGE_SHAPE = (3, 32, 32)
PIXEL_BYTES = 3 * 32 * 32
RECORD_BYTES = 1 + PIXEL_BYTES
NUM_CLASSES = 10
PAD = 4

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class ImageRecord:
    label: int
    pixels: np.ndarray  # (3, 32, 32) uint8


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) uint8
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError("images and labels differ in length")

    def __len__(self):
        return int(self.labels.shape[0])

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices])

    def class_counts(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    def records(self) -> list:
        return [ImageRecord(int(l), p) for l, p in zip(self.labels, self.images)]

    @classmethod
    def from_records(cls, records) -> "Dataset":
        records = list(records)
        if not records:
            return cls(np.zeros((0,) + IMAGE_SHAPE, np.uint8), np.zeros(0, np.int64))
        return cls(np.stack([r.pixels for r in records]).astype(np.uint8),
                   np.array([r.label for r in records], dtype=np.int64))


def _parse(raw: bytes) -> Dataset:
    full = len(raw) // RECORD_BYTES
    if len(raw) % RECORD_BYTES:
        raise FormatError(
            f"truncated record: {len(raw)} bytes is not a multiple of {RECORD_BYTES}",
            offset=full * RECORD_BYTES,
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(full, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > NUM_CLASSES - 1)
    if bad.size:
        k = int(bad[0])
        raise FormatError(f"invalid label {labels[k]} in record {k}", offset=k * RECORD_BYTES)
    images = arr[:, 1:].reshape((full,) + IMAGE_SHAPE).copy()
    return Dataset(images, labels)


def load_dataset_file(path) -> Dataset:
    return _parse(Path(path).read_bytes())


def load_batch_file(path) -> list:
    """Parse one batch file into ImageRecords, in file order."""
    return load_dataset_file(path).records()


def load_cifar_dir(directory) -> tuple:
    """Return (train, test) datasets from a ``cifar-10-batches-bin`` directory."""
    directory = Path(directory)
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not (directory / f).is_file()]
    if missing:
        raise DataError(f"{directory}: missing {', '.join(missing)}")
    parts = [load_dataset_file(directory / f) for f in TRAIN_FILES]
    train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    return train, load_dataset_file(directory / TEST_FILE)


def encode_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, PIXEL_BYTES)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, images], axis=1).tobytes()


def write_batch_file(path, images, labels):
    Path(path).write_bytes(encode_records(images, labels))


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def _stats(mean, std, dtype=np.float32):
    m = np.asarray(mean, dtype=dtype).reshape(-1, 1, 1)
    s = np.asarray(std, dtype=dtype).reshape(-1, 1, 1)
    return m, s


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageRecord) else np.asarray(img)


def normalize_array(pixels: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    """uint8 (..., 3, H, W) -> standardized float32."""
    m, s = _stats(mean, std)
    return ((pixels.astype(np.float32) / 255.0) - m) / s


def normalize(img, mean=CIFAR_MEAN, std=CIFAR_STD) -> Tensor:
    return Tensor(normalize_array(_pixels(img), mean, std))


def denormalize(x, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    """Standardized values back to uint8 pixels (rounded)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    m, s = _stats(mean, std)
    return np.clip(np.rint((data * s + m) * 255.0), 0, 255).astype(np.uint8)


def augment_params(seed: int) -> tuple:
    """(row offset, column offset, flip) drawn for ``seed``; offsets in [0, 2*PAD]."""
    rng = np.random.default_rng(seed)
    dy, dx = rng.integers(0, 2 * PAD + 1, size=2)
    flip = bool(rng.random() < 0.5)
    return int(dy), int(dx), flip


def augment_array(pixels: np.ndarray, seed: int, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    dy, dx, flip = augment_params(seed)
    c, h, w = pixels.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=pixels.dtype)
    padded[:, PAD:PAD + h, PAD:PAD + w] = pixels
    crop = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        crop = crop[:, :, ::-1]
    return normalize_array(crop, mean, std)


def augment(img, seed: int, mean=CIFAR_MEAN, std=CIFAR_STD) -> Tensor:
    """Zero-pad by 4, random 32x32 crop, horizontal flip with p=0.5, standardize."""
    return Tensor(augment_array(_pixels(img), seed, mean, std))


def augment_batch(images: np.ndarray, seeds, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    out = np.empty(images.shape, dtype=np.float32)
    for k, (img, s) in enumerate(zip(images, seeds)):
        out[k] = augment_array(img, int(s), mean, std)
    return out


# --------------------------------------------------------------------------
# subsets
# --------------------------------------------------------------------------

def _labels_of(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.labels
    data = list(data) if not isinstance(data, np.ndarray) else data
    if len(data) and isinstance(data[0], ImageRecord):
        return np.array([r.label for r in data], dtype=np.int64)
    return np.asarray(data, dtype=np.int64)


def subset(data, n: int, seed: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Seed-deterministic class-balanced sample of ``n`` indices (sorted).

    Each class gets ``n // num_classes``; the remainder goes one each to the
    lowest-numbered classes.
    """
    labels = _labels_of(data)
    if n < 0 or n > labels.size:
        raise ParameterError(f"cannot draw {n} samples from {labels.size}")
    rng = np.random.default_rng(seed)
    base, rem = divmod(n, num_classes)
    chosen = []
    for c in range(num_classes):
        want = base + (1 if c < rem else 0)
        pool = np.flatnonzero(labels == c)
        if want > pool.size:
            raise ParameterError(f"class {c} has {pool.size} samples, {want} requested")
        chosen.append(rng.permutation(pool)[:want])
    return np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, np.int64)


def synthetic_cifar(n: int, seed: int, num_classes: int = NUM_CLASSES, noise: float = 40.0) -> Dataset:
    """Learnable stand-in data in CIFAR layout: per-class colour/stripe templates plus noise.

    For exercising the pipeline when the real batches are unavailable.
    """
    rng = np.random.default_rng(seed)
    tmpl_rng = np.random.default_rng(12345)
    yy, xx = np.mgrid[0:32, 0:32]
    templates = []
    for c in range(num_classes):
        colour = tmpl_rng.uniform(40, 215, size=3)
        freq = 1 + c % 5
        angle = np.pi * c / num_classes
        wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) / 32.0)
        templates.append(colour[:, None, None] + 35.0 * wave[None])
    templates = np.stack(templates)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    imgs = templates[labels] + rng.normal(0, noise, size=(n,) + IMAGE_SHAPE)
    return Dataset(np.clip(np.rint(imgs), 0, 255).astype(np.uint8), labels.astype(np.int64))
