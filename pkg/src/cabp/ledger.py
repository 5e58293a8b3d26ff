"""Logical allocation ledger with the five points-of-interest protocol.

Bytes are requested tensor bytes, not allocator pool bytes.  A training step
marks five points in order::

    model_init -> input_init -> forward_peak -> after_backward -> optimizer_peak

``forward_peak`` is the running maximum between ``input_init`` and the
moment it is taken; ``optimizer_peak`` is the running maximum since
``after_backward``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from cabp.tensor import AllocCategory

__all__ = [
    "AccountingError",
    "LedgerEvent",
    "Snapshot",
    "PointsOfInterest",
    "MemoryLedger",
    "FootprintReport",
    "footprint_report",
    "POINTS",
    "MIB",
    "GIB",
    "GB",
]

MIB = 2**20
GIB = 2**30
GB = 10**9

POINTS = ("model_init", "input_init", "forward_peak", "after_backward", "optimizer_peak")


class AccountingError(RuntimeError):
    """A category balance went negative, i.e. something was freed twice."""


@dataclass(frozen=True)
class LedgerEvent:
    seq: int
    delta: int
    category: AllocCategory
    label: str


@dataclass(frozen=True)
class Snapshot:
    label: str
    total: int
    by_category: dict

    def __getitem__(self, category: AllocCategory | str) -> int:
        return self.by_category[AllocCategory(category)]


@dataclass(frozen=True)
class PointsOfInterest:
    model_init: Snapshot
    input_init: Snapshot
    forward_peak: Snapshot
    after_backward: Snapshot
    optimizer_peak: Snapshot

    def __iter__(self):
        return (getattr(self, name) for name in POINTS)

    def rows(self) -> list[dict]:
        out = []
        for snap in self:
            row = {"point": snap.label, "total_bytes": snap.total}
            row.update({c.value: snap.by_category[c] for c in AllocCategory})
            out.append(row)
        return out

    def write_csv(self, fh: TextIO) -> None:
        writer = csv.DictWriter(fh, fieldnames=["point", "total_bytes"] + [c.value for c in AllocCategory],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())


def _zero() -> dict:
    return {c: 0 for c in AllocCategory}


class MemoryLedger:
    """Category-keyed running byte counts for one run."""

    def __init__(self, record_events: bool = True):
        self.record_events = record_events
        self.events: list[LedgerEvent] = []
        self._current = _zero()
        self._total = 0
        self._seq = 0
        self.peak_total = 0
        self.peak_by_category = _zero()
        self._window_peak: Snapshot | None = None
        self.snapshots: dict[str, Snapshot] = {}
        self.history: list[PointsOfInterest] = []

    # -- tracking ---------------------------------------------------------
    @property
    def next_seq(self) -> int:
        return self._seq

    def track(self, event: LedgerEvent) -> None:
        if event.seq != self._seq:
            raise ValueError(f"out-of-order ledger event: expected seq {self._seq}, got {event.seq}")
        cat = AllocCategory(event.category)
        new = self._current[cat] + event.delta
        if new < 0:
            raise AccountingError(
                f"category {cat.value} would go negative ({new} bytes) at event {event.seq} '{event.label}'")
        self._current[cat] = new
        self._total += event.delta
        self._seq += 1
        if self.record_events:
            self.events.append(event)
        if new > self.peak_by_category[cat]:
            self.peak_by_category[cat] = new
        if self._total > self.peak_total:
            self.peak_total = self._total
        if self._window_peak is not None and self._total > self._window_peak.total:
            self._window_peak = Snapshot("window", self._total, dict(self._current))

    def alloc(self, nbytes: int, category: AllocCategory, label: str = "") -> None:
        self.track(LedgerEvent(self._seq, int(nbytes), AllocCategory(category), label))

    def free(self, nbytes: int, category: AllocCategory, label: str = "") -> None:
        self.track(LedgerEvent(self._seq, -int(nbytes), AllocCategory(category), label))

    @property
    def total(self) -> int:
        return self._total

    def current(self, category: AllocCategory | str | None = None) -> int:
        if category is None:
            return self._total
        return self._current[AllocCategory(category)]

    def by_category(self) -> dict:
        return dict(self._current)

    # -- points of interest -----------------------------------------------
    def snapshot(self, label: str) -> Snapshot:
        """Capture the state at a point of interest.

        ``forward_peak`` and ``optimizer_peak`` return the window maximum;
        ``input_init`` and ``after_backward`` open a new window.
        """
        now = Snapshot(label, self._total, dict(self._current))
        if label in ("forward_peak", "optimizer_peak"):
            peak = self._window_peak if self._window_peak is not None else now
            snap = Snapshot(label, peak.total, dict(peak.by_category))
        else:
            snap = now
        if label in ("input_init", "after_backward"):
            self._window_peak = Snapshot("window", self._total, dict(self._current))
        elif label == "optimizer_peak":
            self._window_peak = None
        self.snapshots[label] = snap
        if label == "optimizer_peak" and all(p in self.snapshots for p in POINTS):
            self.history.append(self.points())
        return snap

    def points(self) -> PointsOfInterest:
        missing = [p for p in POINTS if p not in self.snapshots]
        if missing:
            raise LookupError(f"points of interest not recorded: {', '.join(missing)}")
        return PointsOfInterest(*(self.snapshots[p] for p in POINTS))

    # -- export -----------------------------------------------------------
    def write_trace(self, fh: TextIO) -> None:
        """Comma-separated trace: seq,delta_bytes,category,label,running_total."""
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seq", "delta_bytes", "category", "label", "running_total"])
        running = 0
        for ev in self.events:
            running += ev.delta
            writer.writerow([ev.seq, ev.delta, ev.category.value, ev.label, running])

    def trace_text(self) -> str:
        buf = io.StringIO()
        self.write_trace(buf)
        return buf.getvalue()

    def saved_bytes_by_label(self, category: AllocCategory = AllocCategory.ACTIVATION) -> dict[str, int]:
        """Sum of positive deltas per label (what each layer saved for backward)."""
        out: dict[str, int] = {}
        for ev in self.events:
            if ev.category == category and ev.delta > 0:
                out[ev.label] = out.get(ev.label, 0) + ev.delta
        return out


@dataclass(frozen=True)
class FootprintReport:
    activation_share: float
    peak_total: int
    peak_activation: int
    verdicts: list = field(default_factory=list)  # (capacity_gb, fits)

    def lines(self) -> list[str]:
        out = [
            f"peak_total_bytes,{self.peak_total}",
            f"peak_total_gib,{self.peak_total / GIB:.4f}",
            f"peak_activation_bytes,{self.peak_activation}",
            f"activation_share_pct,{100 * self.activation_share:.2f}",
        ]
        out += [f"fits_{cap:g}GB,{'yes' if fits else 'no'}" for cap, fits in self.verdicts]
        return out


def footprint_report(ledger: MemoryLedger,
                     capacities_gb: Iterable[float] = (8, 12, 16, 24)) -> FootprintReport:
    """Activation share of the peak and fit verdicts for decimal-GB devices."""
    if not ledger.snapshots:
        raise LookupError("footprint report needs at least one recorded snapshot")
    peak_total = ledger.peak_total
    peak_act = ledger.peak_by_category[AllocCategory.ACTIVATION]
    share = peak_act / peak_total if peak_total else 0.0
    verdicts = [(cap, peak_total <= cap * GB) for cap in capacities_gb]
    return FootprintReport(share, peak_total, peak_act, verdicts)
