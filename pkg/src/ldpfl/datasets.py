"""Datasets: synthetic Gaussian blobs and the MNIST IDX file format."""

from __future__ import annotations

import gzip
import os
from pathlib import Path

import numpy as np

from .model import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def make_blobs(n_samples: int, n_features: int, n_classes: int, rng: np.random.Generator,
               separation: float = 4.0, noise: float = 1.0,
               embed_dim: int | None = None) -> Dataset:
    """Isotropic Gaussian clusters, one per class, balanced class sizes.

    With ``embed_dim`` the ``n_features``-dimensional clusters are mapped into
    ``embed_dim`` dimensions by a random Gaussian matrix, giving wide but
    low-rank inputs.
    """
    if n_samples < 1 or n_features < 1 or n_classes < 1:
        raise ValueError("n_samples, n_features and n_classes must be >= 1")
    centers = rng.normal(0.0, separation / np.sqrt(2.0), size=(n_classes, n_features))
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    x = centers[labels] + rng.normal(0.0, noise, size=(n_samples, n_features))
    if embed_dim is not None:
        a = rng.normal(0.0, 1.0, size=(n_features, embed_dim))
        x = x @ a / np.sqrt(n_features)
    return Dataset(x, labels, n_classes)


def train_test_split(data: Dataset, n_test: int) -> tuple[Dataset, Dataset]:
    """Split off the last ``n_test`` rows (blob rows are already shuffled)."""
    if not 0 < n_test < len(data):
        raise ValueError(f"n_test must lie in (0, {len(data)})")
    n = len(data) - n_test
    return data.subset(np.arange(n)), data.subset(np.arange(n, len(data)))


def stratified_subset(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``size`` samples with class counts differing by at most one."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if not 0 < size <= labels.size:
        raise ValueError(f"subset size must lie in (0, {labels.size}]")
    base, extra = divmod(size, classes.size)
    bonus = set(rng.choice(classes.size, extra, replace=False).tolist())
    picked = []
    for i, c in enumerate(classes):
        want = base + (i in bonus)
        pool = np.flatnonzero(labels == c)
        if pool.size < want:
            raise ValueError(f"class {c} has {pool.size} samples, {want} requested")
        picked.append(rng.choice(pool, want, replace=False))
    return np.sort(np.concatenate(picked))


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return Path(path).read_bytes()


def parse_idx(buf: bytes, expected_magic: int | None = None, source: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an array of its declared shape."""
    if len(buf) < 4:
        raise IdxFormatError(f"{source}: truncated at byte offset {len(buf)}, no magic number")
    magic = int.from_bytes(buf[:4], "big")
    if buf[0] != 0 or buf[1] != 0:
        raise IdxFormatError(f"{source}: bad magic number 0x{magic:08x} at byte offset 0")
    if buf[2] != 0x08:
        raise IdxFormatError(
            f"{source}: unsupported element type 0x{buf[2]:02x} at byte offset 2 (only ubyte)"
        )
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(
            f"{source}: bad magic number 0x{magic:08x} at byte offset 0, "
            f"expected 0x{expected_magic:08x}"
        )
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(
            f"{source}: truncated at byte offset {len(buf)} inside the {ndim}-dimension header"
        )
    shape = tuple(int.from_bytes(buf[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    need = int(np.prod(shape, dtype=np.int64))
    have = len(buf) - header
    if have < need:
        raise IdxFormatError(
            f"{source}: truncated at byte offset {len(buf)}; shape {shape} needs "
            f"{need} data bytes from offset {header}, found {have}"
        )
    if have > need:
        raise IdxFormatError(f"{source}: {have - need} trailing bytes after offset {header + need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(shape)


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic, source=os.fspath(path))


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(path, subset: int | None = None, split: str = "train", seed: int = 0) -> Dataset:
    """Load MNIST from a directory holding the standard IDX files.

    Pixels are scaled to ``[0, 1]`` and flattened to 784 features. With
    ``subset``, a class-stratified sample of that size is drawn with ``seed``.
    """
    prefix = {"train": "train", "test": "t10k"}[split]
    directory = Path(path)
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"), IMAGES_MAGIC)
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"), LABELS_MAGIC)
    if images.ndim != 3 or labels.ndim != 1:
        raise IdxFormatError("images must be 3-D and labels 1-D")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    y = labels.astype(np.int64)
    if subset is not None:
        idx = stratified_subset(y, subset, np.random.default_rng(seed))
        x, y = x[idx], y[idx]
    return Dataset(x, y, 10)
