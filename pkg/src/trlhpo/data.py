"""MNIST IDX reading and train/validation splitting."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# default locations inside a dataset directory, raw or gzipped
TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")

BUNDLED_DIR = Path(__file__).resolve().parents[2] / "data" / "mnist5k"


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx_images(path) -> np.ndarray:
    """Return uint8 images of shape (count, rows, cols)."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: header needs 16 bytes, file has {len(raw)}")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"{path}: image magic {magic}, expected {IMAGE_MAGIC}")
    need = count * rows * cols
    if len(raw) - 16 < need:
        raise TruncatedFileError(f"{path}: expected {need} pixel bytes, found {len(raw) - 16}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: header needs 8 bytes, file has {len(raw)}")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"{path}: label magic {magic}, expected {LABEL_MAGIC}")
    if len(raw) - 8 < count:
        raise TruncatedFileError(f"{path}: expected {count} labels, found {len(raw) - 8}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


def load_mnist(image_path, label_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as float64 (count, 1, rows, cols) scaled to [0, 1], labels as int64."""
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return images[:, None, :, :].astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (count, rows, cols) and labels in IDX layout (used by tests and tools)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(label_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def find_file(directory, stem: str) -> Path:
    directory = Path(directory)
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def resolve_mnist_dir(path=None) -> Path:
    """Explicit path, then ``$MNIST_DIR``, then the bundled 5k subset."""
    for candidate in (path, os.environ.get("MNIST_DIR"), BUNDLED_DIR):
        if candidate and Path(candidate).is_dir():
            return Path(candidate)
    raise FileNotFoundError("no MNIST directory: pass one or set MNIST_DIR")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    @property
    def num_classes(self) -> int:
        return 10


def split_dataset(images, labels, n_train: int, n_val: int, seed: int = 0, test=None) -> Dataset:
    """Disjoint seeded train/validation draws from one pool."""
    if n_train + n_val > len(images):
        raise ValueError(f"requested {n_train}+{n_val} samples from a pool of {len(images)}")
    order = np.random.default_rng(seed).permutation(len(images))
    tr, va = order[:n_train], order[n_train : n_train + n_val]
    x_test, y_test = test if test is not None else (None, None)
    return Dataset(images[tr], labels[tr], images[va], labels[va], x_test, y_test)


def load_dataset(directory=None, n_train: int = 20_000, n_val: int = 10_000, seed: int = 0) -> Dataset:
    directory = resolve_mnist_dir(directory)
    images, labels = load_mnist(find_file(directory, TRAIN_FILES[0]), find_file(directory, TRAIN_FILES[1]))
    try:
        test = load_mnist(find_file(directory, TEST_FILES[0]), find_file(directory, TEST_FILES[1]))
    except FileNotFoundError:
        test = None
    return split_dataset(images, labels, n_train, n_val, seed, test)
