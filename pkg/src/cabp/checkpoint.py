"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CABP" | version u32 | count u32 |
    count x ( name_len u16 | utf-8 name | rank u8 | dims u32 x rank | dtype u8 | raw data )

dtype codes: 0 = float32, 1 = float64.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

__all__ = ["MAGIC", "VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint", "dumps", "loads"]

MAGIC = b"CABP"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _write(fh: BinaryIO, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(tensors)
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: name or rank too large")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _CODES[arr.dtype]
        fh.write(struct.pack("<B", code))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _read(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, 4) != MAGIC:
        raise CheckpointError("bad magic; not a CABP checkpoint")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
        (code,) = struct.unpack("<B", _read_exact(fh, 1))
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        count_el = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(_read_exact(fh, count_el * dt.itemsize), dtype=dt)
        out[name] = data.reshape(shape).astype(dt.newbyteorder("="))
    if fh.read(1):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def dumps(tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    _write(buf, tensors.items() if isinstance(tensors, Mapping) else tensors)
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    return _read(io.BytesIO(data))


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return _read(fh)
