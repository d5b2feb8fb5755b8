"""Datasets: IDX loading/saving, synthetic generation, IID partitioning."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError
from .seeding import derive_rng

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801

# Synthetic image geometry: 28x28 with an exactly-zero 4-pixel margin, so the
# active 20x20 support mimics the blank borders of scanned-digit data.
_SYN_SIDE = 28
_SYN_MARGIN = 4
_SYN_NOISE_SIGMA = 0.1
_SYN_TEXTURE_AMPLITUDE = 0.12


@dataclass(frozen=True)
class Dataset:
    """Images in [0,1] with integer class labels."""

    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise InputError("images must be a non-empty [N, C, H, W] array")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("labels must be one per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InputError("label outside [0, classes)")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise InputError(f"pixel values outside [0,1]: min {lo}, max {hi}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.classes)

    def label_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


@dataclass(frozen=True)
class Partition:
    """Disjoint, covering assignment of example indices to participants."""

    shards: tuple[np.ndarray, ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.shards)

    def __getitem__(self, participant: int) -> np.ndarray:
        return self.shards[participant]


def _read_header(buf: bytes, path: str, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header at offset {len(buf)} (need {need} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{expected_magic:08x})")
    return struct.unpack(f">{n_dims}I", buf[4:need])


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (big-endian magic 0x803 / 0x801), scaling pixels to [0,1]."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        n, rows, cols = _read_header(header, str(images_path), _IDX_IMAGES_MAGIC, 3)
        pixels = np.fromfile(f, dtype=np.uint8, count=n * rows * cols)
        if pixels.size != n * rows * cols:
            raise FormatError(
                f"{images_path}: truncated pixel data at offset {16 + pixels.size} "
                f"(expected {n * rows * cols} bytes)")
    with open(labels_path, "rb") as f:
        header = f.read(8)
        (n_labels,) = _read_header(header, str(labels_path), _IDX_LABELS_MAGIC, 1)
        labels = np.fromfile(f, dtype=np.uint8, count=n_labels)
        if labels.size != n_labels:
            raise FormatError(
                f"{labels_path}: truncated label data at offset {8 + labels.size} "
                f"(expected {n_labels} bytes)")
    if n != n_labels:
        raise FormatError(f"{images_path}: image count {n} != label count {n_labels}")
    images = (pixels.astype(np.float32) / 255.0).reshape(n, 1, rows, cols)
    return Dataset(images, labels.astype(np.int64), classes=int(labels.max()) + 1 if n else 0)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back out as an IDX pair (pixels quantized to bytes)."""
    n, c, rows, cols = dataset.images.shape
    if c != 1:
        raise InputError("IDX export supports single-channel images only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", _IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.rint(dataset.images * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", _IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def _class_pattern(label: int, classes: int) -> np.ndarray:
    """Mean image for one class: intensity level plus a fixed blocky texture on the support.

    Levels alternate around 0.5 with spread 0.3/(C-1), so two classes get
    means 0.2 and 0.8 while many classes are told apart mostly by texture;
    class distances stay small enough that bounded adversarial perturbations
    can cross them while sigma=0.1 noise cannot. Patterns depend only on
    (label, classes), never on the dataset seed, so independently seeded
    train/test sets share the same class distributions.
    """
    side = _SYN_SIDE - 2 * _SYN_MARGIN
    level = 0.5 + (0.3 / (classes - 1)) * (1 if label % 2 == 0 else -1) if classes > 1 else 0.5
    rng = derive_rng(0xF5BD, "class-pattern", int(label), int(classes))
    coarse = rng.uniform(-1.0, 1.0, (side // 2, side // 2))
    texture = np.kron(coarse, np.ones((2, 2)))
    pattern = np.zeros((_SYN_SIDE, _SYN_SIDE), dtype=np.float64)
    lo, hi = _SYN_MARGIN, _SYN_SIDE - _SYN_MARGIN
    pattern[lo:hi, lo:hi] = np.clip(level + _SYN_TEXTURE_AMPLITUDE * texture, 0.0, 1.0)
    return pattern


def synthetic(classes: int, per_class: int, seed: int) -> Dataset:
    """Gaussian-blob dataset: per-class mean patterns plus sigma=0.1 noise, clipped to [0,1]."""
    if classes < 2:
        raise InputError("need at least 2 classes")
    if per_class < 1:
        raise InputError("need at least 1 example per class")
    rng = derive_rng(seed, "synthetic", classes, per_class)
    n = classes * per_class
    images = np.zeros((n, 1, _SYN_SIDE, _SYN_SIDE), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    lo, hi = _SYN_MARGIN, _SYN_SIDE - _SYN_MARGIN
    support = np.zeros((_SYN_SIDE, _SYN_SIDE), dtype=bool)
    support[lo:hi, lo:hi] = True
    for c in range(classes):
        pattern = _class_pattern(c, classes)
        noise = rng.normal(0.0, _SYN_NOISE_SIGMA, (per_class, _SYN_SIDE, _SYN_SIDE))
        block = np.clip(pattern[None] + noise * support[None], 0.0, 1.0)
        images[c * per_class:(c + 1) * per_class, 0] = block.astype(np.float32)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], classes)


def iid_partition(dataset: Dataset, n: int, seed: int) -> Partition:
    """Shuffle then deal round-robin; shard sizes differ by at most one."""
    if n < 1:
        raise InputError("participant count must be positive")
    if n > len(dataset):
        raise InputError(f"cannot split {len(dataset)} examples across {n} participants")
    order = derive_rng(seed, "partition", n).permutation(len(dataset))
    return Partition(tuple(np.sort(order[i::n]) for i in range(n)))
