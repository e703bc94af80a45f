"""Dataset ingestion: IDX files (MNIST layout) and procedural textures."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray      # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray      # (n,) int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError(f"{self.split} split is empty")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _read_header(data: bytes, path, magic: int, ndims: int):
    need = 4 * (1 + ndims)
    if len(data) < need:
        raise ValueError(f"{path}: truncated header at byte offset {len(data)} (need {need})")
    found = struct.unpack_from(">I", data, 0)[0]
    if found != magic:
        raise ValueError(f"{path}: wrong magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", data, 4), need


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (count, rows, cols), off = _read_header(data, path, IDX_IMAGES_MAGIC, 3)
    end = off + count * rows * cols
    if len(data) < end:
        raise ValueError(f"{path}: truncated pixel data at byte offset {len(data)}, expected {end} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=off).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (count,), off = _read_header(data, path, IDX_LABELS_MAGIC, 1)
    end = off + count
    if len(data) < end:
        raise ValueError(f"{path}: truncated label data at byte offset {len(data)}, expected {end} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=off)


def load_idx(images_path, labels_path, image_size: int | None = None,
             limit: int | None = None, split: str = "train") -> Dataset:
    """Parse an IDX image/label pair; pixels scaled by 1/255 and optionally
    zero-padded (centred) to ``image_size``."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(raw) != len(labels):
        raise ValueError(f"{images_path}: {len(raw)} images but {labels_path} holds {len(labels)} labels")
    if limit is not None:
        raw, labels = raw[:limit], labels[:limit]
    images = raw.astype(np.float32) / np.float32(255.0)
    if image_size is not None and image_size != raw.shape[1]:
        h, w = raw.shape[1:]
        if image_size < max(h, w):
            raise ValueError(f"cannot pad {h}x{w} images down to {image_size}")
        top, left = (image_size - h) // 2, (image_size - w) // 2
        padded = np.zeros((len(images), image_size, image_size), dtype=np.float32)
        padded[:, top:top + h, left:left + w] = images
        images = padded
    return Dataset(images[..., None], labels.astype(np.int64), split)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(directory, split: str, image_size: int = 32, limit: int | None = None) -> Dataset:
    img, lab = MNIST_FILES[split]
    d = Path(directory)
    return load_idx(d / img, d / lab, image_size, limit, split)


def _texture(k: int, size: int) -> np.ndarray:
    """Deterministic pattern for class k: oriented stripes (even k) or checkers (odd k)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if k % 2 == 0:
        theta = math.pi * (k // 2) / 8
        period = 4 + (k // 2) % 3
        phase = (xx * math.cos(theta) + yy * math.sin(theta)) * 2 * math.pi / period
        return 0.5 + 0.5 * np.sign(np.sin(phase) + 1e-9)
    cell = 2 + (k // 2) % 4
    shift = (k // 2) // 4
    return (((xx + shift) // cell + (yy // cell)) % 2).astype(np.float64)


def synth_dataset(num_classes: int, per_class: int, seed: int, image_size: int = 32,
                  noise: float = 0.1, split: str = "train") -> Dataset:
    """Procedural textures plus Gaussian noise, clipped to [0, 1].

    Each class also gets its own brightness, so total intensity (invariant
    under the random shifts) already separates classes when noise is off.
    """
    if not 2 <= num_classes <= 16:
        raise ValueError("synthetic dataset supports 2..16 classes")
    rng = make_rng(seed, 100 if split == "train" else 101)
    images, labels = [], []
    for k in range(num_classes):
        base = (0.4 + 0.6 * (k + 1) / num_classes) * _texture(k, image_size)
        for _ in range(per_class):
            dy, dx = rng.integers(0, 4, size=2)
            img = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
            if noise:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(k)
    order = rng.permutation(len(labels))
    images = np.stack(images)[order].astype(np.float32)[..., None]
    return Dataset(images, np.asarray(labels, dtype=np.int64)[order], split)
