"""Dataset loading, normalization to [0,1], and client partitioning.

Loaders: MNIST IDX files, CIFAR-10 binary batches, and two synthetic
generators (Gaussian blobs and rendered digit glyphs) so the full pipeline
runs without any downloaded data.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: torch.Tensor  # (N, C, H, W) in [0, 1]
    labels: torch.Tensor  # (N,) int64
    name: str

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images/labels shape mismatch")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class ClientDataset:
    client_id: int
    base: Dataset
    indices: list[int]
    unlearn: list[int] = field(default_factory=list)  # D_u
    retain: list[int] = field(default_factory=list)  # D_r

    def __post_init__(self):
        if not self.retain and not self.unlearn:
            self.retain = list(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def batch(self, idx: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        ix = torch.as_tensor(idx, dtype=torch.long)
        return self.base.images[ix], self.base.labels[ix]

    def unlearn_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.batch(self.unlearn)

    def retain_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.batch(self.retain)


def _read_idx_header(raw: bytes, expect_magic: int, ndim: int, path) -> tuple[tuple[int, ...], int]:
    head = 4 * (1 + ndim)
    if len(raw) < head:
        raise DataFormatError(f"truncated IDX header in {path}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise DataFormatError(f"bad magic 0x{magic:08x} in {path}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    return dims, head


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """MNIST-style IDX pair: big-endian headers, u8 pixels divided by 255."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    (n, h, w), off = _read_idx_header(img_raw, IDX_IMAGE_MAGIC, 3, images_path)
    (n_lab,), lab_off = _read_idx_header(lab_raw, IDX_LABEL_MAGIC, 1, labels_path)
    if n != n_lab:
        raise DataFormatError(f"image count {n} != label count {n_lab}")
    if len(img_raw) - off != n * h * w or len(lab_raw) - lab_off != n:
        raise DataFormatError("truncated IDX payload")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=off).reshape(n, 1, h, w)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=lab_off)
    return Dataset(
        torch.from_numpy(pixels.astype(np.float64) / 255.0),
        torch.from_numpy(labels.astype(np.int64)),
        name="idx",
    )


def load_cifar10(batch_paths: list[str | Path]) -> Dataset:
    """CIFAR-10 binary batches: 3073-byte records, plane order R,G,B."""
    images, labels = [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise DataFormatError(f"{path}: length {len(raw)} not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images).astype(np.float64) / 255.0
    labs = np.concatenate(labels)
    if labs.max() > 9:
        raise DataFormatError("label out of range for CIFAR-10")
    return Dataset(torch.from_numpy(pixels), torch.from_numpy(labs.astype(np.int64)), "cifar10")


def synth_blobs(
    num_classes: int,
    per_class: int,
    shape: tuple[int, int, int],
    sep: float,
    seed: int,
) -> Dataset:
    """Clipped Gaussian blobs around fixed per-class mean images."""
    if sep < 0:
        raise ValueError("sep must be >= 0")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    means = 0.5 + sep * (rng.standard_normal((num_classes, c, h, w)) * 0.5)
    images, labels = [], []
    for k in range(num_classes):
        x = means[k] + 0.1 * rng.standard_normal((per_class, c, h, w))
        images.append(np.clip(x, 0.0, 1.0))
        labels.append(np.full(per_class, k))
    return Dataset(
        torch.from_numpy(np.concatenate(images)),
        torch.from_numpy(np.concatenate(labels).astype(np.int64)),
        "synth",
    )


def synth_digits(
    per_class: int,
    seed: int,
    num_classes: int = 10,
    size: int = 28,
) -> Dataset:
    """Rendered digit glyphs with per-sample jitter: a stand-in for MNIST.

    Grayscale (1, size, size) images of the characters 0..9 drawn with
    varying vector fonts, stroke widths, rotation, scale, and position, so
    that intra-class variation is substantial (as in handwritten digits).
    Deterministic under seed.
    """
    import cv2

    fonts = [
        cv2.FONT_HERSHEY_SIMPLEX,
        cv2.FONT_HERSHEY_PLAIN,
        cv2.FONT_HERSHEY_DUPLEX,
        cv2.FONT_HERSHEY_COMPLEX,
        cv2.FONT_HERSHEY_TRIPLEX,
        cv2.FONT_HERSHEY_SCRIPT_SIMPLEX,
    ]
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for k in range(num_classes):
        for _ in range(per_class):
            canvas = np.zeros((size, size), dtype=np.uint8)
            font = fonts[int(rng.integers(0, len(fonts)))]
            scale = (0.7 + 0.6 * rng.random()) * size / 28.0
            thickness = int(rng.integers(1, 4))
            dx = int(rng.integers(-4, 5))
            dy = int(rng.integers(-4, 5))
            cv2.putText(
                canvas,
                str(k % 10),
                (5 + dx, size - 7 + dy),
                font,
                scale,
                int(180 + rng.integers(0, 76)),
                thickness,
                cv2.LINE_AA,
            )
            angle = float(rng.uniform(-25.0, 25.0))
            rot = cv2.getRotationMatrix2D((size / 2, size / 2), angle, 1.0)
            canvas = cv2.warpAffine(canvas, rot, (size, size))
            img = canvas.astype(np.float64) / 255.0
            img += 0.02 * rng.standard_normal((size, size))
            images.append(np.clip(img, 0.0, 1.0)[None])
            labels.append(k)
    return Dataset(
        torch.from_numpy(np.stack(images)),
        torch.as_tensor(labels, dtype=torch.int64),
        "digits",
    )


def shuffle(ds: Dataset, seed: int) -> Dataset:
    """Deterministic sample shuffle; generators emit class-ordered data."""
    order = np.random.default_rng(seed).permutation(len(ds))
    ix = torch.as_tensor(order, dtype=torch.long)
    return Dataset(ds.images[ix], ds.labels[ix], ds.name)


def partition(ds: Dataset, num_clients: int, seed: int) -> list[ClientDataset]:
    """Disjoint uniform shards, sizes differing by at most one."""
    n = len(ds)
    if num_clients > n:
        raise ValueError("more clients than samples")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, num_clients)
    shards, pos = [], 0
    for cid in range(num_clients):
        size = base + (1 if cid < extra else 0)
        idx = [int(i) for i in order[pos : pos + size]]
        pos += size
        shards.append(ClientDataset(client_id=cid, base=ds, indices=idx))
    return shards


def mark_unlearn(cd: ClientDataset, k: int, seed: int) -> ClientDataset:
    """Move k uniformly chosen indices to the unlearn set; rest retained."""
    if k > len(cd.indices):
        raise ValueError(f"cannot unlearn {k} of {len(cd.indices)} samples")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(cd.indices), size=k, replace=False)
    mask = np.zeros(len(cd.indices), dtype=bool)
    mask[chosen] = True
    return ClientDataset(
        client_id=cd.client_id,
        base=cd.base,
        indices=list(cd.indices),
        unlearn=[cd.indices[i] for i in range(len(cd.indices)) if mask[i]],
        retain=[cd.indices[i] for i in range(len(cd.indices)) if not mask[i]],
    )
