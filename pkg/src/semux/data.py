"""Datasets: a seeded synthetic image task and IDX-format image/label files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray  # [N, C, H, W] in [0, 1]
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.x_train.shape[1:]


def class_masks(n_classes: int, size: int) -> np.ndarray:
    """One bright block per class on a 2-row grid covering the image."""
    cols = (n_classes + 1) // 2
    masks = np.zeros((n_classes, size, size))
    bh = size // 2
    bw = size // cols
    for c in range(n_classes):
        r, q = divmod(c, cols)
        masks[c, r * bh:(r + 1) * bh, q * bw:(q + 1) * bw] = 1.0
    return masks


def synthetic(n_classes: int = 8, size: int = 16, n_train: int = 4096, n_test: int = 1024,
              margin: float = 0.35, noise: float = 0.45, seed: int = 0) -> Dataset:
    """Gaussian blobs around class means ``0.5 + margin * (mask_c - mean(mask_c))``, clipped to [0, 1]."""
    if n_classes < 2:
        raise ValueError("synthetic: need at least two classes")
    rng = np.random.default_rng(seed)
    masks = class_masks(n_classes, size)
    means = 0.5 + margin * (masks - masks.mean(axis=(1, 2), keepdims=True))

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = means[y] + noise * rng.standard_normal((n, size, size))
        return np.clip(x, 0.0, 1.0)[:, None], y

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, n_classes)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DatasetError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DatasetError(f"{path}: truncated data, {len(raw) - header} bytes for {count} values")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    Path(path).write_bytes(struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes())


def load_idx_pair(images: str | Path, labels: str | Path) -> tuple[np.ndarray, np.ndarray]:
    x = read_idx(images, IDX_IMAGES_MAGIC)
    y = read_idx(labels, IDX_LABELS_MAGIC)
    if x.shape[0] != y.shape[0]:
        raise DatasetError(f"{images}: {x.shape[0]} images but {labels} has {y.shape[0]} labels")
    return (x.astype(np.float64) / 255.0)[:, None], y.astype(np.int64)


def idx_images(train_images, train_labels, test_images, test_labels, n_classes: int | None = None) -> Dataset:
    x_tr, y_tr = load_idx_pair(train_images, train_labels)
    x_te, y_te = load_idx_pair(test_images, test_labels)
    n = int(max(y_tr.max(), y_te.max()) + 1) if n_classes is None else n_classes
    return Dataset(x_tr, y_tr, x_te, y_te, n)
