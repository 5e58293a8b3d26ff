"""Per-layer cosine similarity between weight gradients of two runs."""

from __future__ import annotations

import math
import statistics
import sys
from dataclasses import dataclass, field, replace
from typing import Callable, TextIO

import numpy as np

from cabp.autodiff import Tape
from cabp.data import Dataset
from cabp.ledger import MemoryLedger
from cabp.models import CompressionPolicy, Conv2d, Linear, Module
from cabp.nn.functional import cross_entropy
from cabp.tensor import AllocCategory, Tensor
from cabp.train import TrainConfig, train

__all__ = [
    "UndefinedCosineError",
    "GradSimilarityReport",
    "cosine",
    "weight_grads",
    "layer_similarity",
    "first_step_similarity",
    "one_epoch_similarity",
    "stage_medians",
]


class UndefinedCosineError(ArithmeticError):
    pass


def _pow2_normalize(v: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0 or not math.isfinite(peak):
        return v
    return np.ldexp(v, -math.frexp(peak)[1])


def cosine(a, b) -> float:
    """``a.b / (|a| |b|)`` in float64.

    Written as ``dot / sqrt(aa * bb)`` so that ``cosine(a, a)`` is exactly 1.
    Each vector is first scaled by a power of two (exact) so the products
    neither underflow nor overflow.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    a, b = _pow2_normalize(a), _pow2_normalize(b)
    aa, bb = float(np.dot(a, a)), float(np.dot(b, b))
    if aa == 0.0 or bb == 0.0:
        raise UndefinedCosineError("cosine is undefined for a zero-norm vector")
    if not (math.isfinite(aa) and math.isfinite(bb)):
        raise UndefinedCosineError("cosine of non-finite vectors")
    return float(np.dot(a, b)) / math.sqrt(aa * bb)


@dataclass
class GradSimilarityReport:
    entries: list[tuple[str, float]]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, layer: str) -> float:
        for name, value in self.entries:
            if name == layer:
                return value
        raise KeyError(layer)

    def layers(self) -> list[str]:
        return [n for n, _ in self.entries]

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def write_csv(self, fh: TextIO = sys.stdout) -> None:
        for key, value in self.metadata.items():
            fh.write(f"# {key}: {value}\n")
        fh.write("layer,cosine\n")
        for name, value in self.entries:
            fh.write(f"{name},{value!r}\n")


def _layer_modules(network: Module) -> list:
    return [m for m in network.modules() if isinstance(m, (Conv2d, Linear))]


def weight_grads(network: Module) -> dict[str, np.ndarray]:
    """Float64 copies of every conv/linear weight gradient, keyed by layer name."""
    out = {}
    for m in _layer_modules(network):
        if m.weight.grad is None:
            raise LookupError(f"{m.name}: no gradient recorded")
        out[m.name] = np.array(m.weight.grad, dtype=np.float64)
    return out


def layer_similarity(grads_a: dict[str, np.ndarray], grads_b: dict[str, np.ndarray],
                     metadata: dict | None = None) -> GradSimilarityReport:
    if list(grads_a) != list(grads_b):
        only_a = sorted(set(grads_a) - set(grads_b))
        only_b = sorted(set(grads_b) - set(grads_a))
        raise KeyError(f"layer mismatch between runs: only in a {only_a[:3]}, only in b {only_b[:3]}")
    entries = [(name, cosine(grads_a[name], grads_b[name])) for name in grads_a]
    return GradSimilarityReport(entries, dict(metadata or {}))


def _single_step_grads(network: Module, x: np.ndarray, y: np.ndarray, dtype: str) -> dict[str, np.ndarray]:
    for p in network.parameters():
        p.grad = None
    network.train()
    with Tape(MemoryLedger(record_events=False)) as tape:
        loss = cross_entropy(network(Tensor(x, AllocCategory.INPUT, dtype=dtype)), y)
    tape.backward(loss)
    grads = weight_grads(network)
    for p in network.parameters():
        p.grad = None
    return grads


def first_step_similarity(build: Callable[[CompressionPolicy], Module], x: np.ndarray, y: np.ndarray,
                          policy: CompressionPolicy, baseline: CompressionPolicy | None = None,
                          dtype: str = "f32") -> GradSimilarityReport:
    """One forward/backward from identical weights on one batch; no update applied.

    ``build(policy)`` must return a freshly initialised network with a fixed seed.
    """
    baseline = baseline or CompressionPolicy()
    ga = _single_step_grads(build(baseline), x, y, dtype)
    gb = _single_step_grads(build(policy), x, y, dtype)
    return layer_similarity(ga, gb, {"mode": "first-step", "baseline": baseline.describe(),
                                     "policy": policy.describe(), "batch": len(y)})


class _GradRecorder:
    def __init__(self, accumulate: bool):
        self.accumulate = accumulate
        self.grads: dict[str, np.ndarray] | None = None

    def __call__(self, epoch, step, last, network):
        if self.accumulate:
            g = weight_grads(network)
            if self.grads is None:
                self.grads = g
            else:
                for k, v in g.items():
                    self.grads[k] += v
        elif last:
            self.grads = weight_grads(network)


def one_epoch_similarity(build: Callable[[CompressionPolicy], Module], dataset: Dataset, config: TrainConfig,
                         policy: CompressionPolicy, baseline: CompressionPolicy | None = None,
                         accumulate: bool = False) -> GradSimilarityReport:
    """Train baseline and compressed networks for one fixed-order epoch and compare gradients.

    Default compares the final mini-batch gradients at matched steps;
    ``accumulate`` sums every step's gradient over the epoch instead.
    """
    if not config.fixed_order:
        raise ValueError("gradient comparison needs fixed_order data")
    config = replace(config, epochs=1)
    baseline = baseline or CompressionPolicy()
    recs = []
    for pol in (baseline, policy):
        rec = _GradRecorder(accumulate)
        train(build(pol), dataset, config, on_grads=rec)
        recs.append(rec.grads)
    meta = {"mode": "one-epoch", "grads": "accumulate" if accumulate else "final-batch",
            "baseline": baseline.describe(), "policy": policy.describe(), "seed": config.seed, "epochs": 1,
            "samples": len(dataset), "batch_size": config.batch_size}
    return layer_similarity(recs[0], recs[1], meta)


def stage_medians(report: GradSimilarityReport) -> dict[str, dict[str, float]]:
    """Median cosine per stage, split into ``downsample`` and ``conv3x3`` groups."""
    groups: dict[str, dict[str, list[float]]] = {}
    for name, value in report.entries:
        parts = name.split(".")
        if not parts[0].startswith("layer"):
            continue
        kind = "downsample" if "downsample" in parts else "conv3x3"
        groups.setdefault(parts[0], {}).setdefault(kind, []).append(value)
    return {stage: {kind: statistics.median(v) for kind, v in g.items()} for stage, g in groups.items()}
