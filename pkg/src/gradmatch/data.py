"""Real and toy datasets, class-indexed sampling, synthetic-set initialization."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IDXFormatError(ValueError):
    pass


class DatasetConsistencyError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class Dataset:
    """Images [N, *sample_shape] with integer labels.

    ``mean``/``std`` are the per-channel normalization statistics that were
    applied to ``images``; a test split loaded with the same statistics is
    directly comparable.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))
    name: str = ""
    class_index: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetConsistencyError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetConsistencyError("label outside [0, num_classes)")
        self.class_index = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> list[int]:
        return [len(ix) for ix in self.class_index]

    def truncate(self, per_class: int) -> "Dataset":
        """Keep the first ``per_class`` samples of each class, in file order."""
        keep = np.sort(np.concatenate([ix[:per_class] for ix in self.class_index]))
        return Dataset(self.images[keep], self.labels[keep], self.num_classes,
                       self.mean, self.std, self.name)

    def denormalize(self, images: np.ndarray) -> np.ndarray:
        shape = (1, -1) + (1,) * (images.ndim - 2)
        return images * self.std.reshape(shape) + self.mean.reshape(shape)


@dataclass
class SyntheticSet:
    """The learnable condensed set: ``ipc`` images per class, class-major order."""

    images: np.ndarray
    labels: np.ndarray
    ipc: int
    num_classes: int

    def class_slice(self, c: int) -> slice:
        return slice(c * self.ipc, (c + 1) * self.ipc)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.images.copy(), self.labels.copy(), self.ipc, self.num_classes)


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    if (magic >> 8) & 0xFF != 0x08:
        raise IDXFormatError(f"{path}: only unsigned-byte payloads are supported")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(raw) - offset != count:
        raise IDXFormatError(f"{path}: payload has {len(raw) - offset} bytes, header says {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def load_idx(images_path, labels_path, limit_per_class: int | None = None,
             stats: tuple[np.ndarray, np.ndarray] | None = None, num_classes: int = 10,
             name: str = "") -> Dataset:
    """Load an IDX image/label pair, scale to [0, 1] and channel-normalize.

    Statistics are fitted on the (possibly truncated) data unless ``stats``
    is given, which is how a test split reuses its training statistics.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DatasetConsistencyError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    x = images.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = x[:, None, :, :]
    ds = Dataset(x, labels.astype(np.int64), num_classes, name=name)
    if limit_per_class is not None:
        ds = ds.truncate(limit_per_class)
    if stats is None:
        mean = ds.images.mean(axis=(0, 2, 3))
        std = ds.images.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)  # constant channel: centre only
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    ds.images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    ds.mean, ds.std = mean, std
    return ds


def find_idx_pair(root, split: str = "train") -> tuple[Path, Path]:
    """Locate MNIST-style ``{split}-images-idx3-ubyte[.gz]`` files under ``root``."""
    prefix = "train" if split == "train" else "t10k"
    root = Path(root)
    for sub in (root, root / "mnist", root / "MNIST", root / "MNIST" / "raw"):
        for ext in ("", ".gz"):
            img = sub / f"{prefix}-images-idx3-ubyte{ext}"
            lab = sub / f"{prefix}-labels-idx1-ubyte{ext}"
            if img.exists() and lab.exists():
                return img, lab
    raise FileNotFoundError(f"no {prefix} IDX files under {root}")


def default_data_dir() -> Path | None:
    env = os.environ.get("GRADMATCH_DATA_DIR")
    return Path(env) if env else None


def blob_directions(num_classes: int, dim: int) -> np.ndarray:
    """Unit class directions: axis vectors when they fit, else fixed random ones."""
    if num_classes <= dim:
        return np.eye(dim)[:num_classes]
    u = np.random.default_rng(12345).normal(size=(num_classes, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def gaussian_blobs(num_classes: int, per_class: int, dim: int, separation: float,
                   seed: int) -> Dataset:
    if num_classes < 2 or per_class < 1 or separation < 0:
        raise ValueError("need num_classes >= 2, per_class >= 1, separation >= 0")
    rng = np.random.default_rng(seed)
    centers = separation * blob_directions(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    x = centers[labels] + rng.normal(size=(len(labels), dim))
    return Dataset(x, labels, num_classes, np.zeros(1), np.ones(1), name="blobs")


def sample_class_batch(ds: Dataset, c: int, n: int, rng: np.random.Generator):
    """Up to ``n`` samples of class ``c`` drawn without replacement."""
    idx = ds.class_index[c]
    if len(idx) == 0:
        raise SamplingError(f"class {c} has no samples")
    pick = rng.permutation(idx)[:n]
    return ds.images[pick], ds.labels[pick]


def init_synthetic(ds: Dataset, ipc: int, mode: str = "noise", seed: int = 0,
                   dtype=np.float64) -> SyntheticSet:
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(ds.num_classes), ipc)
    shape = (ds.num_classes * ipc,) + ds.sample_shape
    if mode == "noise":
        images = rng.normal(size=shape)
    elif mode == "real_sample":
        images = np.empty(shape)
        for c in range(ds.num_classes):
            idx = ds.class_index[c]
            if len(idx) < ipc:
                raise SamplingError(f"class {c} has {len(idx)} samples, need {ipc}")
            images[c * ipc:(c + 1) * ipc] = ds.images[rng.choice(idx, ipc, replace=False)]
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return SyntheticSet(images.astype(dtype), labels, ipc, ds.num_classes)
