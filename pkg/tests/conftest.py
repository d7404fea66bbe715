import gzip
from pathlib import Path

import numpy as np
import pytest

from vikanformer.data import write_idx_images, write_idx_labels
from vikanformer.gradcheck import tiny_model_config
from vikanformer.tensor import Precision, using_precision


@pytest.fixture(autouse=True)
def f64():
    """Tests run in F64 unless they switch precision themselves."""
    with using_precision(Precision.F64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return tiny_model_config("sinekan")


def synthetic_digits(labels: np.ndarray, seed: int = 0) -> np.ndarray:
    """uint8 [N, 28, 28]: class c lights rows 2c..2c+3, plus a little noise."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 30, size=(len(labels), 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        pixels[i, 2 * c:2 * c + 4, 4:24] = 255
    return pixels


def write_mnist_dir(path: Path, n_train: int = 48, n_test: int = 20, gzip_train: bool = True) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    for split, prefix, n, packed in (("train", "train", n_train, gzip_train), ("test", "t10k", n_test, False)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        images = write_idx_images(synthetic_digits(labels, seed=0 if split == "train" else 1))
        label_bytes = write_idx_labels(labels)
        if packed:
            (path / f"{prefix}-images-idx3-ubyte.gz").write_bytes(gzip.compress(images))
            (path / f"{prefix}-labels-idx1-ubyte.gz").write_bytes(gzip.compress(label_bytes))
        else:
            (path / f"{prefix}-images-idx3-ubyte").write_bytes(images)
            (path / f"{prefix}-labels-idx1-ubyte").write_bytes(label_bytes)
    return path


@pytest.fixture
def mnist_dir(tmp_path):
    return write_mnist_dir(tmp_path / "mnist")
