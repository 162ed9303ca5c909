"""Desk-scale data supply: IDX image/label files and a deterministic
synthetic class-template dataset."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # [N, H, W, 1] f64 in [0, 1]
    labels: np.ndarray          # [N] int
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError("image/label count mismatch")
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise DataError("label exceeds num_classes")

    @property
    def size(self):
        return self.images.shape[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX ubyte files (images: 3 dims, labels: 1 dim)."""
    with open(images_path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataError("truncated image header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"bad image magic 0x{magic:08X}")
    if len(raw) != 16 + n * h * w:
        raise DataError("truncated image payload")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w, 1)
    images = images.astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError("truncated label header")
    magic, nl = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"bad label magic 0x{magic:08X}")
    if len(raw) != 8 + nl:
        raise DataError("truncated label payload")
    if nl != n:
        raise DataError("image/label count mismatch")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images, labels, num_classes=int(labels.max()) + 1 if nl else 0)


def write_idx(dataset: Dataset, images_path, labels_path):
    """Write u8 IDX files; pixels are rounded to the 1/255 grid."""
    n, h, w, _ = dataset.images.shape
    pix = np.clip(np.rint(dataset.images[..., 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pix.tobytes(order="C"))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def class_templates(num_classes, image_size):
    """Oriented soft bars through the image center, one angle per class."""
    coords = np.arange(image_size, dtype=np.float64) - (image_size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    width = image_size / 10.0
    templates = np.empty((num_classes, image_size, image_size))
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        # signed distance from the line through the origin at angle theta
        dist = np.abs(-np.sin(theta) * xx + np.cos(theta) * yy)
        templates[k] = np.exp(-(dist ** 2) / (2.0 * width ** 2))
    return templates


def synth_dataset(n_per_class, num_classes, image_size, seed,
                  noise_sigma=0.1) -> Dataset:
    """Deterministic class-conditional bar patterns plus seeded noise."""
    if min(n_per_class, num_classes, image_size) < 1:
        raise DataError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    templates = class_templates(num_classes, image_size)
    n = n_per_class * num_classes
    images = np.empty((n, image_size, image_size, 1))
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for k in range(num_classes):
        for _ in range(n_per_class):
            img = templates[k] + rng.normal(0.0, noise_sigma,
                                            (image_size, image_size)) if noise_sigma > 0 \
                else templates[k].copy()
            images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    return Dataset(images, labels, num_classes)


def subset(dataset: Dataset, fraction, seed) -> Dataset:
    """Class-stratified deterministic sample of floor(fraction * N) items."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return dataset
    n_keep = int(fraction * dataset.size)
    if n_keep == 0:
        raise DataError("fraction selects zero items")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == k)
                for k in range(dataset.num_classes)]
    # proportional allocation, remainders to the largest fractional shares
    shares = np.array([idx.size * fraction for idx in by_class])
    take = np.floor(shares).astype(int)
    rem = n_keep - take.sum()
    if rem > 0:
        order = np.argsort(-(shares - take), kind="stable")
        take[order[:rem]] += 1
    chosen = []
    for k, idx in enumerate(by_class):
        pick = rng.choice(idx.size, size=min(take[k], idx.size), replace=False)
        chosen.append(idx[np.sort(pick)])
    sel = np.sort(np.concatenate(chosen))
    return Dataset(dataset.images[sel], dataset.labels[sel], dataset.num_classes)
