"""
MNIST ingestion from IDX files (optionally gzip-wrapped), normalization and
deterministic shuffled batching.

IDX layout (big-endian):
    images: 0x00000803 | N | rows | cols | N*rows*cols unsigned bytes
    labels: 0x00000801 | N | N unsigned bytes
"""
import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from loguru import logger

from vikanformer.errors import (
    DataError,
    IdxDimensionError,
    IdxMagicError,
    IdxTruncatedError,
    LabelRangeError,
    LengthMismatchError,
)
from vikanformer.tensor import Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

# 標準的な MNIST の統計量
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

Split = Literal["train", "test"]
SPLIT_SIZES = {"train": 60000, "test": 10000}
SPLIT_PREFIX = {"train": "train", "test": "t10k"}


def _maybe_gunzip(raw: bytes) -> bytes:
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as e:
            raise IdxTruncatedError(f"broken gzip stream: {e}") from None
    return raw


def _read_header(raw: bytes, count: int) -> tuple[int, ...]:
    size = 4 * count
    if len(raw) < size:
        raise IdxTruncatedError(f"IDX header needs {size} bytes, got {len(raw)}")
    return struct.unpack(f">{count}I", raw[:size])


def parse_idx_images(raw: bytes, rows: int = 28, cols: int = 28) -> Tensor:
    """IDX image bytes -> Tensor[N, rows, cols] with pixel / 255."""
    raw = _maybe_gunzip(raw)
    (magic,) = _read_header(raw, 1)
    if magic == LABEL_MAGIC:
        raise IdxMagicError(f"magic 0x{magic:08x}: label file passed as images")
    if magic != IMAGE_MAGIC:
        raise IdxMagicError(f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    _, n, n_rows, n_cols = _read_header(raw, 4)
    if (n_rows, n_cols) != (rows, cols):
        raise IdxDimensionError(f"image dims {n_rows}x{n_cols}, expected {rows}x{cols}")
    payload = raw[16:]
    expected = n * n_rows * n_cols
    if len(payload) < expected:
        raise IdxTruncatedError(f"image payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise IdxTruncatedError(f"image payload has {len(payload) - expected} trailing bytes beyond {n} images")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, n_rows, n_cols)
    return Tensor(pixels.astype(np.float64) / 255.0)


def parse_idx_labels(raw: bytes, n_classes: int = 10) -> np.ndarray:
    raw = _maybe_gunzip(raw)
    (magic,) = _read_header(raw, 1)
    if magic == IMAGE_MAGIC:
        raise IdxMagicError(f"magic 0x{magic:08x}: image file passed as labels")
    if magic != LABEL_MAGIC:
        raise IdxMagicError(f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    _, n = _read_header(raw, 2)
    payload = raw[8:]
    if len(payload) != n:
        raise LengthMismatchError(f"label payload has {len(payload)} bytes, header declares {n}")
    labels = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise LabelRangeError(f"label {labels[bad]} at index {bad} outside [0, {n_classes - 1}]")
    return labels


def write_idx_images(pixels: np.ndarray) -> bytes:
    """uint8 [N, rows, cols] -> IDX bytes."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    return struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + pixels.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">2I", LABEL_MAGIC, labels.size) + labels.tobytes()


def normalize(images: Tensor) -> Tensor:
    """(x - 0.1307) / 0.3081 with the standard MNIST statistics."""
    return Tensor((images.data - MNIST_MEAN) / MNIST_STD, dtype=images.dtype)


@dataclass
class Batch:
    images: Tensor  # [B, 28, 28]
    labels: np.ndarray  # [B]
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    images: Tensor  # [N, 28, 28], normalized
    labels: np.ndarray  # [N]
    split: Split

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise LengthMismatchError(
                f"{self.split}: {len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        """First n samples (deterministic)."""
        return Dataset(Tensor(self.images.data[:n], dtype=self.images.dtype), self.labels[:n].copy(), self.split)


def pair(images: Tensor, labels: np.ndarray, split: Split) -> Dataset:
    return Dataset(normalize(images), labels, split)


def _find_file(data_dir: Path, stem: str) -> Path:
    for name in (stem, f"{stem}.gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise DataError(f"{stem}[.gz] not found in {data_dir}")


def load_mnist(data_dir: str | Path, split: Split, strict_size: bool = True) -> Dataset:
    data_dir = Path(data_dir)
    prefix = SPLIT_PREFIX[split]
    image_path = _find_file(data_dir, f"{prefix}-images-idx3-ubyte")
    label_path = _find_file(data_dir, f"{prefix}-labels-idx1-ubyte")
    images = parse_idx_images(image_path.read_bytes())
    labels = parse_idx_labels(label_path.read_bytes())
    if len(images) != len(labels):
        raise LengthMismatchError(f"{image_path.name} has {len(images)} images, {label_path.name} has {len(labels)} labels")
    if strict_size and len(labels) != SPLIT_SIZES[split]:
        raise DataError(f"{split} split has {len(labels)} samples, expected {SPLIT_SIZES[split]}")
    logger.info(f"Loaded {split} split: {len(labels)} samples from {data_dir}")
    return pair(images, labels, split)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Fisher–Yates permutation keyed by (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n)


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_permutation(len(ds), seed, epoch) if shuffle else np.arange(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(Tensor(ds.images.data[idx], dtype=ds.images.dtype), ds.labels[idx], idx)
