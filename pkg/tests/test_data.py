import gzip
import struct

import numpy as np
import pytest

from trlhpo.data import (
    BadMagicError, CountMismatchError, TruncatedFileError, find_file, load_dataset, load_mnist, read_idx_images,
    read_idx_labels, split_dataset, write_idx,
)


@pytest.fixture
def tiny_idx(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(10, 4, 3), dtype=np.uint8)
    images[0, 0, 0] = 255
    images[0, 0, 1] = 0
    labels = rng.integers(0, 10, size=10, dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    write_idx(ip, lp, images, labels)
    return ip, lp, images, labels


def test_round_trip_and_scaling(tiny_idx):
    ip, lp, images, labels = tiny_idx
    x, y = load_mnist(ip, lp)
    assert x.shape == (10, 1, 4, 3) and x.dtype == np.float64
    assert x[0, 0, 0, 0] == 1.0 and x[0, 0, 0, 1] == 0.0
    np.testing.assert_array_equal(x[:, 0] * 255, images)
    np.testing.assert_array_equal(y, labels)


def test_header_dimensions_are_respected(tmp_path):
    path = tmp_path / "img"
    path.write_bytes(struct.pack(">IIII", 2051, 3, 28, 28) + bytes(3 * 784))
    assert read_idx_images(path).shape == (3, 28, 28)


def test_gzip_is_detected(tiny_idx, tmp_path):
    ip, lp, images, _ = tiny_idx
    gz = tmp_path / "img.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    np.testing.assert_array_equal(read_idx_images(gz), images)


def test_bad_magic(tiny_idx):
    ip, lp, _, _ = tiny_idx
    with pytest.raises(BadMagicError):
        read_idx_images(lp)
    with pytest.raises(BadMagicError):
        read_idx_labels(ip)


def test_truncated(tiny_idx, tmp_path):
    ip, lp, _, _ = tiny_idx
    short = tmp_path / "short"
    short.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(TruncatedFileError):
        read_idx_images(short)
    short.write_bytes(lp.read_bytes()[:6])
    with pytest.raises(TruncatedFileError):
        read_idx_labels(short)


def test_count_mismatch(tmp_path):
    ip, lp = tmp_path / "i", tmp_path / "l"
    write_idx(ip, lp, np.zeros((10, 2, 2), np.uint8), np.zeros(9, np.uint8))
    with pytest.raises(CountMismatchError):
        load_mnist(ip, lp)


def test_errors_are_distinct():
    assert len({BadMagicError, TruncatedFileError, CountMismatchError}) == 3
    assert not issubclass(BadMagicError, TruncatedFileError)


def test_split_disjoint_and_sized():
    images = np.arange(100, dtype=float).reshape(100, 1, 1, 1)
    labels = np.arange(100) % 10
    ds = split_dataset(images, labels, 60, 30, seed=3)
    assert len(ds.x_train) == 60 and len(ds.x_val) == 30
    assert not set(ds.x_train.ravel()) & set(ds.x_val.ravel())
    again = split_dataset(images, labels, 60, 30, seed=3)
    np.testing.assert_array_equal(ds.x_val, again.x_val)
    with pytest.raises(ValueError):
        split_dataset(images, labels, 80, 30)


def test_find_file_accepts_gz(tmp_path):
    (tmp_path / "train-images-idx3-ubyte.gz").write_bytes(b"")
    assert find_file(tmp_path, "train-images-idx3-ubyte").name.endswith(".gz")
    with pytest.raises(FileNotFoundError):
        find_file(tmp_path, "t10k-images-idx3-ubyte")


def test_bundled_subset_loads():
    ds = load_dataset(None, 2000, 512, seed=0)
    assert ds.x_train.shape == (2000, 1, 28, 28)
    assert ds.x_val.shape == (512, 1, 28, 28)
    assert 0.0 <= ds.x_train.min() and ds.x_train.max() <= 1.0
    assert set(np.unique(ds.y_train)) <= set(range(10))
