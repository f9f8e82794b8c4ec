"""Dataset construction: synthetic Gaussian blobs and IDX image files.

Datasets are immutable after construction: inputs are (n, d) float64,
labels are (n,) class indices, and box records the valid input range
([0, 1] for images, None for synthetic data).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    box: tuple[float, float] | None = None

    def __post_init__(self):
        inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or inputs.shape[0] != labels.shape[0]:
            raise ValueError("inputs must be (n, d) with matching (n,) labels")
        if inputs.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("inputs must be finite")
        if np.any(labels < 0):
            raise ValueError("labels must be non-negative class indices")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset(self.inputs[indices], self.labels[indices],
                       name or self.name, self.box)


def gen_blobs(n: int, centers, sigma: float, seed: int) -> Dataset:
    """Isotropic Gaussian blobs, one class per center.

    Class sizes stay within one of n/k (round-robin assignment), so prefix
    subsets remain balanced; deterministic per seed.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[0] < 2:
        raise ValueError("need at least 2 centers")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    k = centers.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.arange(n, dtype=np.int64) % k
    inputs = centers[labels] + sigma * rng.normal(size=(n, centers.shape[1]))
    return Dataset(inputs, labels, name="blobs")


def _read_be_u32(fh, offset: int) -> tuple[int, int]:
    raw = fh.read(4)
    if len(raw) != 4:
        raise IdxFormatError("truncated header", offset)
    return struct.unpack(">I", raw)[0], offset + 4


def _read_idx(path, expected_magic: int, n_dims: int) -> np.ndarray:
    with open(path, "rb") as fh:
        offset = 0
        magic, offset = _read_be_u32(fh, offset)
        if magic != expected_magic:
            raise IdxFormatError(
                f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0
            )
        dims = []
        for _ in range(n_dims):
            d, offset = _read_be_u32(fh, offset)
            dims.append(d)
        count = int(np.prod(dims))
        raw = fh.read(count)
        if len(raw) != count:
            raise IdxFormatError(
                f"expected {count} data bytes, found {len(raw)}", offset + len(raw)
            )
        return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path, take: int | None = None) -> Dataset:
    """Parse the big-endian IDX pair (images magic 0x803, labels 0x801).

    Pixels are scaled to [0, 1] (255 -> 1.0 exactly) and flattened;
    ``take`` keeps the leading n examples so published subset sizes are
    reproducible byte-for-byte.
    """
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}", 4
        )
    if take is not None:
        if take < 1:
            raise ValueError("take must be >= 1")
        images = images[:take]
        labels = labels[:take]
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), name="mnist", box=(0.0, 1.0))


def write_idx_images(path, images: np.ndarray) -> None:
    """Inverse of the image half of load_mnist_idx ((n, rows, cols) uint8)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def split_train_val(ds: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    """Leading-block validation split (no shuffle), order preserved."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    n_val = int(round(len(ds) * val_fraction))
    n_val = max(1, min(n_val, len(ds) - 1))
    val = ds.subset(np.arange(n_val), name=f"{ds.name}-val")
    train = ds.subset(np.arange(n_val, len(ds)), name=f"{ds.name}-train")
    return train, val


def standardize(ds: Dataset) -> Dataset:
    """Per-feature zero-mean unit-variance transform, synthetic data only
    (box-constrained inputs would leave their valid range)."""
    if ds.box is not None:
        raise ValueError("standardization is only supported for box-free datasets")
    mu = ds.inputs.mean(axis=0)
    sd = ds.inputs.std(axis=0)
    sd[sd == 0.0] = 1.0
    return Dataset((ds.inputs - mu) / sd, ds.labels, name=ds.name, box=None)
