"""Per-layer W / X / Z byte estimates computed from shape inference alone."""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from cabp.compression import pooled_hw
from cabp.ledger import MIB
from cabp.models import ResNet, build_network
from cabp.tensor import DTYPES

__all__ = [
    "LayerMemoryRow",
    "StaticMemoryReport",
    "static_model",
    "parse_kernel",
    "kernel_label",
    "PUBLISHED_LAYERS",
]

# the 17 conv layers listed in the published per-layer table for ResNet-18
PUBLISHED_LAYERS = (
    "conv1",
    "layer1.0.conv1", "layer1.0.conv2", "layer1.1.conv1", "layer1.1.conv2",
    "layer2.0.conv1", "layer2.0.conv2", "layer2.0.downsample.0", "layer2.1.conv1", "layer2.1.conv2",
    "layer3.0.conv1", "layer3.0.conv2", "layer3.0.downsample.0", "layer3.1.conv1", "layer3.1.conv2",
    "layer4.0.conv1", "layer4.0.conv2",
)


def parse_kernel(text: str) -> tuple[int, int] | None:
    """``"2x2"`` -> (2, 2), ``"2x3"`` -> (2, 3), ``"3"`` -> (3, 3), ``"off"`` -> None."""
    text = text.strip().lower()
    if text in ("off", "none", "full"):
        return None
    parts = text.split("x")
    try:
        if len(parts) == 1:
            kh = kw = int(parts[0])
        elif len(parts) == 2:
            kh, kw = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ValueError(f"bad kernel '{text}'; expected KxK, KhxKw or off") from None
    if kh < 1 or kw < 1:
        raise ValueError(f"bad kernel '{text}'; components must be >= 1")
    return kh, kw


def kernel_label(k: tuple[int, int]) -> str:
    return f"z{k[0]}" if k[0] == k[1] else f"z{k[0]}x{k[1]}"


@dataclass(frozen=True)
class LayerMemoryRow:
    name: str
    w_bytes: int
    x_bytes: int
    z_bytes: dict = field(default_factory=dict)  # (kh, kw) -> bytes
    kernel: tuple[int, int] = (1, 1)
    input_shape: tuple = ()

    def mib(self) -> tuple[float, float, list[float]]:
        return self.w_bytes / MIB, self.x_bytes / MIB, [b / MIB for b in self.z_bytes.values()]


@dataclass
class StaticMemoryReport:
    rows: list[LayerMemoryRow]
    ks: tuple[tuple[int, int], ...]
    batch: int
    dtype: str

    def total(self, column: str | tuple[int, int]) -> int:
        if column == "w":
            return sum(r.w_bytes for r in self.rows)
        if column == "x":
            return sum(r.x_bytes for r in self.rows)
        return sum(r.z_bytes[column] for r in self.rows)

    def row(self, name: str) -> LayerMemoryRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def subset(self, names: Sequence[str]) -> "StaticMemoryReport":
        by_name = {r.name: r for r in self.rows}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise KeyError(f"layers not in model: {', '.join(missing)}")
        return StaticMemoryReport([by_name[n] for n in names], self.ks, self.batch, self.dtype)

    def header(self) -> list[str]:
        return ["layer", "w_mib", "x_mib"] + [f"{kernel_label(k)}_mib" for k in self.ks]

    def write_csv(self, fh: TextIO = sys.stdout, decimals: int = 2) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.header())
        fmt = f"{{:.{decimals}f}}"
        for r in self.rows:
            writer.writerow([r.name, fmt.format(r.w_bytes / MIB), fmt.format(r.x_bytes / MIB)]
                            + [fmt.format(r.z_bytes[k] / MIB) for k in self.ks])
        writer.writerow(["Sum", fmt.format(self.total("w") / MIB), fmt.format(self.total("x") / MIB)]
                        + [fmt.format(self.total(k) / MIB) for k in self.ks])


def static_model(network: ResNet | str, batch: int = 32, dtype: str = "f32",
                 ks: Sequence[tuple[int, int]] = ((2, 2), (4, 4)),
                 resolution: tuple[int, int] | None = None) -> StaticMemoryReport:
    """Byte counts for every conv layer's weight, full input and pooled input.

    ``network`` may be a built (possibly unmaterialized) :class:`ResNet` or an
    architecture name.  Nothing is allocated beyond the shape walk.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    if isinstance(network, str):
        network = build_network(network, resolution=resolution, materialize=False)
    itemsize = DTYPES[dtype].itemsize
    ks = tuple((int(k[0]), int(k[1])) for k in ks)
    res = resolution or network.config.input_resolution
    shape = (batch, network.config.in_channels, *res)
    rows = []
    for conv, (n, c, h, w) in network.conv_input_shapes(shape):
        x_el = n * c * h * w
        z = {}
        for k in ks:
            zh, zw = pooled_hw(h, w, k)
            z[k] = n * c * zh * zw * itemsize
        rows.append(LayerMemoryRow(conv.name, int(np.prod(conv.spec.weight_shape)) * itemsize,
                                   x_el * itemsize, z, conv.spec.kernel, (n, c, h, w)))
    return StaticMemoryReport(rows, ks, batch, dtype)
