"""MNIST IDX ingestion, stratified subsets and synthetic Gaussian blobs."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_UBYTE = 0x08


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def take(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, name="<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{name}: truncated header at byte offset {len(raw)} (need 4 magic bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"{name}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{name}: truncated header at byte offset {len(raw)} (need {header} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise DataError(
            f"{name}: truncated payload at byte offset {len(raw)}, expected {header + size} bytes"
        )
    if len(raw) > header + size:
        raise DataError(f"{name}: {len(raw) - header - size} trailing bytes after offset {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError(f"IDX encoder supports unsigned bytes only, got {array.dtype}")
    magic = (_UBYTE << 8) | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path, split="train") -> Dataset:
    """Read an (images, labels) IDX pair; pixels are scaled to [0, 1].

    Gzip-compressed files are detected by their magic bytes.
    """
    pixels = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if len(pixels) != len(labels):
        raise DataError(
            f"{images_path} holds {len(pixels)} images but {labels_path} holds {len(labels)} labels "
            f"(count field at byte offset 4)"
        )
    images = pixels.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels.astype(np.int64), split)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` for datasets whose pixels are multiples of 1/255."""
    pixels = np.rint(np.asarray(dataset.images)[:, 0] * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(encode_idx(pixels))
    Path(labels_path).write_bytes(encode_idx(np.asarray(dataset.labels, dtype=np.uint8)))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            p = directory / f"{name}{suffix}"
            if p.exists():
                return p
    raise DataError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory, train_size=10000, val_size=5000, seed=0) -> dict[str, Dataset]:
    """Standard MNIST layout -> ``{"train", "val", "test"}``.

    The 60k training file is shuffled with ``seed``; its last ``val_size``
    rows become the validation split and a class-stratified ``train_size``
    subset of the remainder is the training split.  ``train_size=None``
    keeps the whole remainder.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    full = load_idx(_find(directory, "train-images-idx3-ubyte"), _find(directory, "train-labels-idx1-ubyte"))
    test = load_idx(
        _find(directory, "t10k-images-idx3-ubyte"), _find(directory, "t10k-labels-idx1-ubyte"), "test"
    )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(full))
    if val_size >= len(full):
        raise DataError(f"val_size {val_size} leaves no training data")
    pool = full.take(order[: len(full) - val_size])
    val = full.take(order[len(full) - val_size :], "val")
    train = pool if train_size is None else subset(pool, train_size, seed)
    return {"train": train, "val": val, "test": test}


# ---------------------------------------------------------------------------
# subsets and synthetic data
# ---------------------------------------------------------------------------


def subset(dataset: Dataset, n: int, seed) -> Dataset:
    """Seeded, class-stratified sample without replacement.

    Per-class quotas are proportional to class frequency; leftover slots go
    to the largest fractional remainders (lowest class first on ties).
    """
    total = len(dataset)
    if n > total:
        raise DataError(f"requested subset of {n} from a dataset of {total}")
    if n < 0:
        raise DataError("subset size must be nonnegative")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(dataset.labels, return_counts=True)
    exact = counts * n / total
    quota = np.floor(exact).astype(int)
    short = n - quota.sum()
    order = np.lexsort((classes, -(exact - quota)))
    quota[order[:short]] += 1
    picked = []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(dataset.labels == cls)
        picked.append(rng.choice(members, size=q, replace=False))
    idx = np.concatenate(picked)
    return dataset.take(idx[rng.permutation(len(idx))])


def blob_means(classes: int, dim: int, spacing: float) -> np.ndarray:
    """Class c sits at ``spacing * e_(c mod dim)``, negated on every second wrap."""
    means = np.zeros((classes, dim))
    for c in range(classes):
        means[c, c % dim] = spacing * (1.0 if (c // dim) % 2 == 0 else -1.0)
    return means


def synth_blobs(classes=2, n_per_class=100, dim=2, seed=0, spacing=6.0, sigma=1.0, split="train") -> Dataset:
    if min(classes, n_per_class, dim) < 1:
        raise DataError("classes, n_per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    means = blob_means(classes, dim, spacing)
    x = np.concatenate([means[c] + sigma * rng.standard_normal((n_per_class, dim)) for c in range(classes)])
    y = np.repeat(np.arange(classes), n_per_class)
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], split)
