"""Dataset ingestion and generation.

IDX readers/writers for MNIST-style ubyte files, a seeded Gaussian-blob
generator, a seeded 28x28 digit-image generator built from scikit-learn's
bundled handwritten digits (a desk-scale MNIST stand-in when the real IDX
files are not on disk), and seeded splitting.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncation, or count mismatch."""


@dataclass
class Dataset:
    """Flat feature rows in [0, 1] with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs {self.inputs.shape} do not match {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices, name=None) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices],
                       self.class_count, name or self.name)


def _read_be32(f, path, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def read_idx(images_path, labels_path, name=None) -> Dataset:
    """Load an IDX image/label file pair into flat [0, 1] rows.

    Big-endian layout: images carry magic 0x00000803 then count/rows/cols
    and count*rows*cols pixel bytes; labels carry magic 0x00000801 then
    count and count label bytes. The two counts must agree.
    """
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, images_path, "count")
        rows = _read_be32(f, images_path, "rows")
        cols = _read_be32(f, images_path, "cols")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise IdxFormatError(
                f"{images_path}: expected {count * rows * cols} pixel bytes, got {len(payload)}"
            )
        pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be32(f, labels_path, "count")
        payload = f.read(label_count)
        if len(payload) != label_count:
            raise IdxFormatError(
                f"{labels_path}: expected {label_count} label bytes, got {len(payload)}"
            )
        labels = np.frombuffer(payload, dtype=np.uint8)
    if label_count != count:
        raise IdxFormatError(
            f"count mismatch: {count} images in {images_path} "
            f"vs {label_count} labels in {labels_path}"
        )
    class_count = int(labels.max()) + 1 if labels.size else 0
    return Dataset(pixels / 255.0, labels.astype(np.int64), class_count,
                   name or "idx")


def write_idx(dataset: Dataset, images_path, labels_path, rows=None, cols=None) -> None:
    """Write a dataset back to an IDX pair (pixels rounded to ubyte).

    Reading the written pair recovers the pixel bytes exactly when the
    inputs came from ubyte data scaled by 1/255.
    """
    n, d = dataset.inputs.shape
    if rows is None or cols is None:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise ValueError(f"cannot infer square image shape from {d} features")
        rows = cols = side
    if rows * cols != d:
        raise ValueError(f"rows*cols = {rows * cols} does not match {d} features")
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def gen_blobs(classes: int, per_class: int, dim: int, spread: float, seed: int,
              name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters around distinct seeded centers in [0, 1]^d.

    Points are clipped into [0, 1]; with spread 0 every point equals its
    class center.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(classes, dim))
    points = np.repeat(centers, per_class, axis=0)
    if spread:
        points = points + rng.normal(0.0, spread, size=points.shape)
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(classes * per_class)
    return Dataset(np.clip(points, 0.0, 1.0)[order], labels[order], classes, name)


def gen_digits(n_train: int, n_test: int, seed: int, image_size: int = 28,
               max_rotation: float = 10.0, max_shift: int = 2,
               noise: float = 0.10) -> tuple[Dataset, Dataset]:
    """Seeded 10-class digit-image task shaped like MNIST (image_size^2 dims).

    Upsamples scikit-learn's bundled 8x8 handwritten digits to image_size and
    draws each sample as a randomly rotated, shifted, noised variant of a
    base image. Train and test draw from disjoint base-image pools, so test
    generalization is across writers' digit instances, not pixel noise.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    raw = load_digits()
    rng = np.random.default_rng(seed)
    base_images = raw.images / 16.0
    zoom = image_size / base_images.shape[1]
    upscaled = np.stack([
        np.clip(ndimage.zoom(img, zoom, order=1), 0.0, 1.0) for img in base_images
    ])

    train_pool, test_pool = [], []
    for cls in range(10):
        idx = np.flatnonzero(raw.target == cls)
        idx = idx[rng.permutation(idx.size)]
        held_out = max(1, idx.size // 5)
        test_pool.append(idx[:held_out])
        train_pool.append(idx[held_out:])
    train_pool = np.concatenate(train_pool)
    test_pool = np.concatenate(test_pool)

    def render(pool, count, tag):
        picks = rng.choice(pool, size=count, replace=True)
        out = np.empty((count, image_size * image_size))
        for i, b in enumerate(picks):
            img = upscaled[b]
            angle = rng.uniform(-max_rotation, max_rotation)
            img = ndimage.rotate(img, angle, reshape=False, order=1, cval=0.0)
            dx, dy = rng.uniform(-max_shift, max_shift, size=2)
            img = ndimage.shift(img, (dy, dx), order=1, cval=0.0)
            if noise:
                img = img + rng.normal(0.0, noise, size=img.shape)
            out[i] = np.clip(img, 0.0, 1.0).ravel()
        return Dataset(out, raw.target[picks].astype(np.int64), 10, tag)

    return (render(train_pool, n_train, "digits-train"),
            render(test_pool, n_test, "digits-test"))


def split(dataset: Dataset, fractions, seed: int) -> list[Dataset]:
    """Seeded disjoint partition; sizes floor(n * f) with the rounding
    remainder assigned to the first part when the fractions sum to 1."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    total = sum(fractions)
    if total > 1.0 + 1e-9:
        raise ValueError(f"fractions sum to {total}, must be <= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    sizes = [int(dataset.n * f) for f in fractions]
    if abs(total - 1.0) <= 1e-9:
        sizes[0] += dataset.n - sum(sizes)
    parts = []
    start = 0
    for i, size in enumerate(sizes):
        parts.append(dataset.subset(order[start : start + size],
                                    f"{dataset.name}[{i}]"))
        start += size
    return parts


def to_csv(dataset: Dataset, path) -> None:
    """Feature columns then the label; for eyeballing synthetic data."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.inputs, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
