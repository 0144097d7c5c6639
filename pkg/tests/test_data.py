"""Binary loaders on hand-built files; partitioning invariants."""
import struct
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrecon.data import (
    DataFormatError,
    load_cifar10,
    load_idx,
    mark_unlearn,
    partition,
    synth_blobs,
    synth_digits,
)

MNIST_DIR = Path("/root/pkg/data/mnist")


def _write_idx_pair(tmp_path, pixels: np.ndarray, labels: np.ndarray):
    n, h, w = pixels.shape
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + pixels.astype(np.uint8).tobytes())
    lab.write_bytes(struct.pack(">II", 0x00000801, n) + labels.astype(np.uint8).tobytes())
    return img, lab


def test_idx_two_image_example(tmp_path):
    pixels = np.array(
        [[[0, 255], [128, 64]], [[255, 0], [1, 2]]], dtype=np.uint8
    )
    img, lab = _write_idx_pair(tmp_path, pixels, np.array([3, 9]))
    ds = load_idx(img, lab)
    assert ds.images.shape == (2, 1, 2, 2)
    assert float(ds.images[0, 0, 0, 0]) == 0.0
    assert float(ds.images[0, 0, 0, 1]) == 1.0
    assert float(ds.images[0, 0, 1, 0]) == pytest.approx(128 / 255)
    assert ds.labels.tolist() == [3, 9]


def test_idx_bad_magic(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(struct.pack(">IIII", 0x00000802, 1, 2, 2) + b"\x00" * 4)
    lab.write_bytes(struct.pack(">II", 0x00000801, 1) + b"\x00")
    with pytest.raises(DataFormatError, match="bad magic"):
        load_idx(img, lab)


def test_idx_truncated_payload(tmp_path):
    img, lab = _write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    img.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    img, _ = _write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
    lab = tmp_path / "lab2.idx"
    lab.write_bytes(struct.pack(">II", 0x00000801, 3) + b"\x00" * 3)
    with pytest.raises(DataFormatError):
        load_idx(img, lab)


@pytest.mark.skipif(
    not (MNIST_DIR / "train-images-idx3-ubyte").exists(),
    reason="official MNIST files not present in this environment",
)
def test_idx_official_mnist():
    ds = load_idx(MNIST_DIR / "train-images-idx3-ubyte", MNIST_DIR / "train-labels-idx1-ubyte")
    assert ds.images.shape == (60000, 1, 28, 28)
    assert int(ds.labels[0]) == 5


def test_cifar_single_record(tmp_path):
    rec = bytes([7]) + bytes([128] * 3072)
    path = tmp_path / "batch.bin"
    path.write_bytes(rec)
    ds = load_cifar10([path])
    assert ds.images.shape == (1, 3, 32, 32)
    assert int(ds.labels[0]) == 7
    assert torch.allclose(ds.images, torch.full_like(ds.images, 128 / 255))


def test_cifar_truncated(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(b"\x00" * 3000)
    with pytest.raises(DataFormatError):
        load_cifar10([path])


def test_cifar_label_range(tmp_path):
    path = tmp_path / "batch.bin"
    path.write_bytes(bytes([11]) + bytes(3072))
    with pytest.raises(DataFormatError, match="label"):
        load_cifar10([path])


def test_blobs_sep_zero_valid():
    ds = synth_blobs(2, 10, (1, 4, 4), sep=0.0, seed=0)
    assert len(ds) == 20
    assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0


def test_blobs_deterministic():
    a = synth_blobs(3, 5, (1, 4, 4), 0.5, seed=1)
    b = synth_blobs(3, 5, (1, 4, 4), 0.5, seed=1)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)


def test_blobs_nearest_centroid_separable():
    ds = synth_blobs(2, 100, (1, 4, 4), sep=0.5, seed=0)
    x = ds.images.reshape(len(ds), -1).numpy()
    y = ds.labels.numpy()
    cents = np.stack([x[y == k].mean(axis=0) for k in range(2)])
    pred = np.argmin(((x[:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert (pred == y).mean() > 0.95


def test_digits_deterministic_and_ranged():
    a = synth_digits(3, seed=5)
    b = synth_digits(3, seed=5)
    assert torch.equal(a.images, b.images)
    assert a.images.shape == (30, 1, 28, 28)
    assert float(a.images.min()) >= 0.0 and float(a.images.max()) <= 1.0
    assert sorted(set(a.labels.tolist())) == list(range(10))


def test_partition_even():
    ds = synth_blobs(2, 50, (1, 2, 2), 0.5, seed=0)
    shards = partition(ds, 10, seed=0)
    assert [len(s) for s in shards] == [10] * 10


def test_partition_remainder_rule():
    ds = synth_blobs(1, 101, (1, 2, 2), 0.0, seed=0)
    sizes = [len(s) for s in partition(ds, 10, seed=0)]
    assert sorted(sizes, reverse=True) == [11] + [10] * 9
    assert sizes[0] == 11  # extras go to the first clients


def test_partition_deterministic_and_disjoint():
    ds = synth_blobs(2, 30, (1, 2, 2), 0.5, seed=0)
    a = partition(ds, 7, seed=3)
    b = partition(ds, 7, seed=3)
    assert all(x.indices == y.indices for x, y in zip(a, b))
    all_idx = [i for s in a for i in s.indices]
    assert sorted(all_idx) == list(range(len(ds)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 12))
def test_partition_size_invariant(n, c):
    if c > n:
        return
    ds = synth_blobs(1, n, (1, 2, 2), 0.0, seed=0)
    sizes = [len(s) for s in partition(ds, c, seed=1)]
    assert sum(sizes) == n
    assert max(sizes) - min(sizes) <= 1


def test_mark_unlearn_zero():
    ds = synth_blobs(1, 10, (1, 2, 2), 0.0, seed=0)
    cd = partition(ds, 2, seed=0)[0]
    out = mark_unlearn(cd, 0, seed=0)
    assert out.unlearn == [] and sorted(out.retain) == sorted(cd.indices)


def test_mark_unlearn_all():
    ds = synth_blobs(1, 10, (1, 2, 2), 0.0, seed=0)
    cd = partition(ds, 2, seed=0)[0]
    out = mark_unlearn(cd, len(cd), seed=0)
    assert out.retain == [] and sorted(out.unlearn) == sorted(cd.indices)


def test_mark_unlearn_deterministic_partition():
    ds = synth_blobs(1, 10, (1, 2, 2), 0.0, seed=0)
    cd = partition(ds, 2, seed=0)[0]
    a = mark_unlearn(cd, 1, seed=7)
    b = mark_unlearn(cd, 1, seed=7)
    assert a.unlearn == b.unlearn and len(a.unlearn) == 1
    assert sorted(a.unlearn + a.retain) == sorted(cd.indices)


def test_mark_unlearn_too_many():
    ds = synth_blobs(1, 10, (1, 2, 2), 0.0, seed=0)
    cd = partition(ds, 2, seed=0)[0]
    with pytest.raises(ValueError):
        mark_unlearn(cd, len(cd) + 1, seed=0)
