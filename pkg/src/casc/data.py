"""Dataset handling: canonical CIFAR-10 binary batches, the float mapping,
and a synthetic smooth-image generator for desk-scale runs.

Binary record layout: 1 label byte + 3072 pixel bytes (channel-major planes
of 1024 bytes each, R then G then B), 3073 bytes per record, 10,000 records
per official batch file.
"""

from __future__ import annotations

import os
import tarfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from casc.errors import DataError, FormatError
from casc.features import bilinear_resize

RECORD_BYTES = 3073
IMAGE_SIDE = 32
TRAIN_BATCH_NAMES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_BATCH_NAME = "test_batch.bin"
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"


@dataclass
class DatasetHandle:
    train_images: np.ndarray  # (N,32,32,3) float32 in [-1,1]
    train_labels: np.ndarray  # (N,) uint8
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def n_train(self) -> int:
        return self.train_images.shape[0]

    @property
    def n_test(self) -> int:
        return self.test_images.shape[0]


def pixels_to_float(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float32 [-1,1]; byte 0 maps to -1.0, byte 255 to +1.0."""
    return (pixels.astype(np.float32) / 127.5) - 1.0


def float_to_pixels(images: np.ndarray) -> np.ndarray:
    clipped = np.clip(np.asarray(images), -1.0, 1.0)
    return np.round((clipped + 1.0) * 127.5).astype(np.uint8)


def parse_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (labels (N,), images uint8 (N,32,32,3))."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {RECORD_BYTES}-byte records"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].copy()
    planes = records[:, 1:].reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE)
    images = np.transpose(planes, (0, 2, 3, 1)).copy()
    return labels, images


def serialize_cifar_batch(labels: np.ndarray, images: np.ndarray) -> bytes:
    """Inverse of parse_cifar_batch; byte-exact round trip."""
    labels = np.asarray(labels, dtype=np.uint8)
    images = np.asarray(images, dtype=np.uint8)
    n = labels.shape[0]
    if images.shape != (n, IMAGE_SIDE, IMAGE_SIDE, 3):
        raise FormatError(f"images must be ({n},{IMAGE_SIDE},{IMAGE_SIDE},3), got {images.shape}")
    planes = np.transpose(images, (0, 3, 1, 2)).reshape(n, -1)
    records = np.concatenate([labels[:, None], planes], axis=1)
    return records.tobytes()


def ingest_cifar10(path) -> DatasetHandle:
    """Load the canonical binary batches from a directory, preserving the
    train/test split; pixels mapped to [-1,1]."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset path {root} is not a directory")
    train_files = [root / name for name in TRAIN_BATCH_NAMES if (root / name).exists()]
    test_file = root / TEST_BATCH_NAME
    if not train_files:
        raise DataError(f"no canonical training batches (data_batch_*.bin) under {root}")
    if not test_file.exists():
        raise DataError(f"missing canonical test batch {test_file}")
    train_parts = [parse_cifar_batch(p) for p in train_files]
    test_labels, test_images = parse_cifar_batch(test_file)
    train_labels = np.concatenate([p[0] for p in train_parts])
    train_images = np.concatenate([p[1] for p in train_parts])
    return DatasetHandle(
        train_images=pixels_to_float(train_images),
        train_labels=train_labels,
        test_images=pixels_to_float(test_images),
        test_labels=test_labels,
    )


def synthetic_images(n: int, seed: int = 0, size: int = IMAGE_SIDE) -> np.ndarray:
    """Smooth random color fields in [-1,1]: low-resolution noise upsampled
    bilinearly, plus a mild global gradient. Compressible by construction."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1.0, 1.0, size=(n, 4, 4, 3))
    img = bilinear_resize(coarse, size)
    ramp = np.linspace(-0.5, 0.5, size)
    gy = rng.uniform(-0.4, 0.4, size=(n, 1, 1, 3)) * ramp[None, :, None, None]
    gx = rng.uniform(-0.4, 0.4, size=(n, 1, 1, 3)) * ramp[None, None, :, None]
    out = np.clip(img * 0.7 + gy + gx, -1.0, 1.0)
    return out.astype(np.float32)


def synthetic_dataset(n_train: int, n_test: int, seed: int = 0) -> DatasetHandle:
    rng = np.random.default_rng(seed)
    return DatasetHandle(
        train_images=synthetic_images(n_train, seed=seed),
        train_labels=rng.integers(0, 10, size=n_train, dtype=np.uint8),
        test_images=synthetic_images(n_test, seed=seed + 1),
        test_labels=rng.integers(0, 10, size=n_test, dtype=np.uint8),
    )


def write_synthetic_cifar_dir(dest, n_train: int = 512, n_test: int = 256, seed: int = 0) -> Path:
    """Write a canonical-format dataset directory filled with synthetic images."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    ds = synthetic_dataset(n_train, n_test, seed=seed)
    (dest / TRAIN_BATCH_NAMES[0]).write_bytes(
        serialize_cifar_batch(ds.train_labels, float_to_pixels(ds.train_images))
    )
    (dest / TEST_BATCH_NAME).write_bytes(
        serialize_cifar_batch(ds.test_labels, float_to_pixels(ds.test_images))
    )
    return dest


def fetch_cifar10(dest_dir, url: str = CIFAR10_URL) -> Path:
    """Download and unpack the official binary archive (network access
    required); returns the directory holding the .bin batches."""
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    archive = dest / "cifar-10-binary.tar.gz"
    if not archive.exists():
        urllib.request.urlretrieve(url, archive)  # noqa: S310 (documented fetch helper)
    with tarfile.open(archive, "r:gz") as tar:
        tar.extractall(dest)
    inner = dest / "cifar-10-batches-bin"
    if not inner.is_dir():
        raise DataError(f"archive did not contain cifar-10-batches-bin under {dest}")
    return inner


def resolve_dataset(spec: str | os.PathLike | None, n_train: int = 512, n_test: int = 256, seed: int = 0) -> DatasetHandle:
    """CLI-facing loader: a directory of canonical batches, or the literal
    'synthetic[:n_train[:n_test]]' for the built-in generator."""
    if spec is None:
        spec = "synthetic"
    text = str(spec)
    if text.startswith("synthetic"):
        parts = text.split(":")
        if len(parts) >= 2 and parts[1]:
            n_train = int(parts[1])
        if len(parts) >= 3 and parts[2]:
            n_test = int(parts[2])
        return synthetic_dataset(n_train, n_test, seed=seed)
    return ingest_cifar10(text)
