"""Dataset readers/writers and the deterministic batch iterator.

Formats:

* CIFAR-10 binary: records of 1 label byte + 3072 pixel bytes
  (1024 R, 1024 G, 1024 B, each 32x32 row-major).
* MNIST IDX: big-endian ``u32`` magic (0x00000803 images, 0x00000801 labels),
  big-endian ``u32`` dims, then unsigned bytes.  ``.gz`` files are accepted.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "DataFormatError",
    "Dataset",
    "read_cifar10",
    "write_cifar10",
    "read_idx",
    "write_idx",
    "read_mnist",
    "load_dataset",
    "synthetic_gaussian",
    "synthetic_cifar",
    "iterate_batches",
    "CIFAR_RECORD",
    "CIFAR10_MEAN",
    "CIFAR10_STD",
]

CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"inconsistent dataset: images {self.images.shape}, labels {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.name)

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# -- CIFAR-10 --------------------------------------------------------------
def read_cifar10(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label {labels.max()} out of range for CIFAR-10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images, labels, 10, Path(path).name)


def write_cifar10(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"CIFAR-10 images must be (N, 3, 32, 32), got {images.shape}")
    rec = np.empty((len(images), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(len(images), -1)
    Path(path).write_bytes(rec.tobytes())


# -- IDX -----------------------------------------------------------------
def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path: str | Path, expect_magic: int | None = None) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: only unsigned-byte IDX data is supported (magic 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != expected:
        raise DataFormatError(f"{path}: payload {len(raw) - header} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{directory}: missing {stem}[.gz]")


def read_mnist(directory: str | Path, train: bool = True) -> Dataset:
    directory = Path(directory)
    prefix = "train" if train else "t10k"
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"), IDX_IMAGES_MAGIC)
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{directory}: {len(images)} images but {len(labels)} labels")
    return Dataset(images[:, None], labels.astype(np.int64), 10, f"mnist-{prefix}")


# -- synthetic -----------------------------------------------------------
def synthetic_gaussian(n: int, shape=(3, 32, 32), num_classes: int = 10, seed: int = 0) -> Dataset:
    """Seeded Gaussian noise images with uniformly random labels."""
    rng = np.random.default_rng(seed)
    imgs = np.clip(np.rint(rng.normal(127.5, 50.0, (n, *shape))), 0, 255).astype(np.uint8)
    labels = rng.integers(0, num_classes, n).astype(np.int64)
    return Dataset(imgs, labels, num_classes, f"gaussian-{seed}")


def synthetic_cifar(n: int, seed: int = 0, num_classes: int = 10, noise: float = 60.0,
                    max_shift: int = 4) -> Dataset:
    """Learnable CIFAR-shaped data: per-class texture prototypes, shifted and noised.

    Each class owns a smooth colour field plus an oriented grating of its own
    frequency; samples are randomly translated copies with contrast jitter
    and pixel noise.  Fine spatial detail carries part of the class signal.
    """
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(10_007)  # prototypes are fixed across seeds
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    protos = np.empty((num_classes, 3, 32, 32))
    for c in range(num_classes):
        base = proto_rng.normal(0, 1, (3, 4, 4))
        smooth = np.kron(base, np.ones((8, 8)))
        theta = np.pi * c / num_classes
        freq = 2 * np.pi * (0.15 + 0.25 * proto_rng.random())
        grating = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + proto_rng.uniform(0, 2 * np.pi))
        tint = proto_rng.normal(0, 1, 3)
        protos[c] = 0.6 * smooth + grating[None] * tint[:, None, None]
    labels = rng.integers(0, num_classes, n).astype(np.int64)
    shifts = rng.integers(-max_shift, max_shift + 1, (n, 2))
    contrast = rng.uniform(0.6, 1.4, n)
    imgs = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for i in range(n):
        p = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(1, 2)) * contrast[i]
        px = 127.5 + 40.0 * p + rng.normal(0, noise, p.shape)
        imgs[i] = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    return Dataset(imgs, labels, num_classes, f"synthetic-cifar-{seed}")


# -- loading -------------------------------------------------------------
def load_dataset(path: str | Path | None, kind: str, *, train: bool = True, limit: int | None = None,
                 seed: int = 0, synthetic_samples: int = 5000) -> Dataset:
    """Load ``kind`` in {cifar10, mnist, synthetic, gaussian} from ``path``.

    For ``cifar10`` the path may be a single ``.bin`` file or a directory with
    ``data_batch_*.bin`` (train) / ``test_batch.bin`` (test).  Files are read
    in sorted order and records keep their on-disk order.
    """
    if kind == "synthetic":
        ds = synthetic_cifar(synthetic_samples, seed=seed if train else seed + 1)
    elif kind == "gaussian":
        ds = synthetic_gaussian(synthetic_samples, seed=seed if train else seed + 1)
    elif kind == "cifar10":
        if path is None:
            raise FileNotFoundError("cifar10 needs a data path")
        p = Path(path)
        if p.is_file():
            files = [p]
        else:
            pattern = "data_batch_*.bin" if train else "test_batch.bin"
            files = sorted(p.glob(pattern)) or sorted(p.glob(f"*/{pattern}"))
            if not files:
                raise FileNotFoundError(f"{p}: no {pattern} files")
        parts = [read_cifar10(f) for f in files]
        ds = Dataset(np.concatenate([d.images for d in parts]), np.concatenate([d.labels for d in parts]),
                     10, "cifar10" if train else "cifar10-test")
    elif kind == "mnist":
        if path is None:
            raise FileNotFoundError("mnist needs a data path")
        ds = read_mnist(path, train=train)
    else:
        raise ValueError(f"unknown dataset kind '{kind}'")
    return ds.subset(limit)


def _augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    offs = rng.integers(0, 2 * pad + 1, (n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, offs[i, 0]: offs[i, 0] + h, offs[i, 1]: offs[i, 1] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def iterate_batches(ds: Dataset, batch_size: int, *, epoch: int = 0, seed: int = 0, fixed_order: bool = True,
                    augment: bool = False, mean=None, std=None, drop_last: bool = False,
                    dtype=np.float32) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield normalised ``(images, labels)`` batches.

    ``fixed_order`` keeps the stored order every epoch and disables
    augmentation; otherwise order and augmentation come from ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    rng = np.random.default_rng([seed, epoch])
    order = np.arange(n) if fixed_order else rng.permutation(n)
    c = ds.images.shape[1]
    mean = np.asarray(mean if mean is not None else [0.5] * c, dtype=dtype).reshape(1, c, 1, 1)
    std = np.asarray(std if std is not None else [0.25] * c, dtype=dtype).reshape(1, c, 1, 1)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start: start + batch_size]
        imgs = ds.images[idx]
        if augment and not fixed_order:
            imgs = _augment(imgs, rng)
        x = (imgs.astype(dtype) / dtype(255.0) - mean) / std
        yield np.ascontiguousarray(x), ds.labels[idx]
