"""Average-pool an activation map for storage and inflate it back.

Pooling is non-overlapping with floor-sized output; remainder rows and
columns are dropped on compression and filled on inflation by clamping to
the nearest pooled block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cabp.tensor import Tensor, as_array

__all__ = ["CompressedActivation", "compress", "inflate", "compressed_bytes", "pooled_hw"]


def _pair(k) -> tuple[int, int]:
    if isinstance(k, int):
        k = (k, k)
    kh, kw = (int(v) for v in k)
    if kh < 1 or kw < 1:
        raise ValueError(f"pooling kernel must be >= 1, got {(kh, kw)}")
    return kh, kw


def pooled_hw(h: int, w: int, k) -> tuple[int, int]:
    kh, kw = _pair(k)
    zh, zw = h // kh, w // kw
    if zh < 1 or zw < 1:
        raise ValueError(f"spatial size {h}x{w} is smaller than pooling kernel {kh}x{kw}")
    return zh, zw


@dataclass(frozen=True)
class CompressedActivation:
    """Pooled means plus the only metadata needed to undo the pooling."""

    z: np.ndarray
    original_shape: tuple[int, int, int, int]
    k: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return int(self.z.nbytes)

    @property
    def dtype(self) -> np.dtype:
        return self.z.dtype


def compress(x, k) -> CompressedActivation:
    """Block means of ``x`` (NCHW) over non-overlapping ``k`` windows."""
    arr = as_array(x)
    if arr.ndim != 4:
        raise ValueError(f"compress expects an NCHW tensor, got shape {arr.shape}")
    kh, kw = _pair(k)
    n, c, h, w = arr.shape
    zh, zw = pooled_hw(h, w, (kh, kw))
    if (kh, kw) == (1, 1):
        return CompressedActivation(arr.copy(), (n, c, h, w), (1, 1))
    blocks = arr[:, :, : zh * kh, : zw * kw].reshape(n, c, zh, kh, zw, kw)
    # wider accumulator: a block of equal values averages back to exactly that value
    acc = np.longdouble if arr.dtype == np.float64 else np.float64
    z = blocks.sum(axis=(3, 5), dtype=acc) / acc(kh * kw)
    return CompressedActivation(z.astype(arr.dtype), (n, c, h, w), (kh, kw))


def _clamped_index(size: int, k: int, pooled: int) -> np.ndarray:
    return np.minimum(np.arange(size) // k, pooled - 1)


def inflate(c: CompressedActivation) -> np.ndarray:
    """Replicate each block mean over its block, returning ``original_shape``."""
    n, ch, h, w = c.original_shape
    kh, kw = c.k
    if (kh, kw) == (1, 1):
        return c.z.copy()
    zh, zw = c.z.shape[2:]
    rows = _clamped_index(h, kh, zh)
    cols = _clamped_index(w, kw, zw)
    return c.z[:, :, rows[:, None], cols[None, :]]


def compressed_bytes(c: CompressedActivation | Tensor) -> int:
    if isinstance(c, CompressedActivation):
        return c.nbytes
    return int(as_array(c).nbytes)
