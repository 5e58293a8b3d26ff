"""SGD with momentum, step learning-rate schedule and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np

from cabp.autodiff import Tape
from cabp.data import Dataset, iterate_batches
from cabp.ledger import MemoryLedger, PointsOfInterest
from cabp.models import Module
from cabp.nn.functional import cross_entropy
from cabp.tensor import DTYPES, AllocCategory, Tensor

__all__ = [
    "NumericalError",
    "TrainConfig",
    "MetricsRecord",
    "TrainResult",
    "SGD",
    "sgd_momentum_step",
    "step_lr",
    "train",
    "train_step",
    "evaluate",
    "write_metrics",
    "METRICS_HEADER",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "step", "split", "loss", "acc", "lr", "forward_peak_bytes")


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    lr: float = 0.1
    momentum: float = 0.9
    gamma: float = 0.1
    decay_interval: int = 30
    weight_decay: float = 0.0
    seed: int = 0
    dtype: str = "f32"
    fixed_order: bool = True
    augment: bool = False
    drop_last: bool = False
    log_interval: int = 1
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.epochs < 0 or self.decay_interval < 1 or self.log_interval < 1:
            raise ValueError("epochs must be >= 0 and intervals >= 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    step: int
    split: str
    loss: float
    acc: float
    lr: float
    forward_peak_bytes: int

    def row(self) -> list:
        return [self.epoch, self.step, self.split, repr(self.loss), repr(self.acc), repr(self.lr),
                self.forward_peak_bytes]


def step_lr(epoch: int, base_lr: float, gamma: float, interval: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * gamma ** (epoch // interval)


def sgd_momentum_step(params: list[np.ndarray], grads: list[np.ndarray], state: list[np.ndarray | None],
                      lr: float, m: float) -> None:
    """In-place ``v <- m*v + g; w <- w - lr*v``.  ``state[i] is None`` means no buffer yet."""
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape}")
        if m:
            v = state[i]
            if v is None:
                v = state[i] = np.zeros_like(w)
            v *= w.dtype.type(m)
            v += g
            step = v
        else:
            step = g
        w -= w.dtype.type(lr) * step


class SGD:
    """Momentum SGD whose velocity buffers are charged as OptimizerState."""

    def __init__(self, params: Iterable[Tensor], momentum: float = 0.9, weight_decay: float = 0.0,
                 ledger: MemoryLedger | None = None):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.ledger = ledger
        self.state: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        live = [(i, p) for i, p in enumerate(self.params) if p.grad is not None]
        if self.ledger is not None and self.momentum:
            for i, p in live:
                if self.state[i] is None:
                    self.ledger.alloc(p.nbytes, AllocCategory.OPTIMIZER_STATE, f"{p.name}.momentum")
        grads = []
        for _, p in live:
            g = p.grad
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            grads.append(g)
        state = [self.state[i] for i, _ in live]
        sgd_momentum_step([p.data for _, p in live], grads, state, lr, self.momentum)
        for (i, _), v in zip(live, state):
            self.state[i] = v

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                if self.ledger is not None:
                    self.ledger.free(p.grad.nbytes, AllocCategory.GRADIENT, p.name or "grad")
                p.grad = None

    @property
    def state_bytes(self) -> int:
        return sum(v.nbytes for v in self.state if v is not None)


@dataclass
class TrainResult:
    network: Module
    metrics: list[MetricsRecord] = field(default_factory=list)
    points: list[PointsOfInterest] = field(default_factory=list)
    ledger: MemoryLedger | None = None

    def epoch_losses(self) -> list[float]:
        return [r.loss for r in self.metrics if r.split == "train_epoch"]


def track_parameters(network: Module, ledger: MemoryLedger) -> None:
    for name, p in network.named_parameters():
        ledger.alloc(p.nbytes, AllocCategory.PARAMETER, name)


def train_step(network: Module, optimizer: SGD, x: np.ndarray, y: np.ndarray, lr: float,
               ledger: MemoryLedger, *, dtype: str = "f32", mark_model_init: bool = False,
               on_grads: Callable | None = None) -> tuple[float, float, PointsOfInterest]:
    """One mini-batch: forward, backward, optimizer step, with the five snapshots."""
    optimizer.zero_grad()
    if mark_model_init or "model_init" not in ledger.snapshots:
        ledger.snapshot("model_init")
    xt = Tensor(x, AllocCategory.INPUT, dtype=dtype, name="input")
    ledger.alloc(xt.nbytes, AllocCategory.INPUT, "input")
    ledger.snapshot("input_init")
    with Tape(ledger) as tape:
        logits = network(xt)
        loss = cross_entropy(logits, y, label="loss")
    ledger.snapshot("forward_peak")
    tape.backward(loss)
    ledger.snapshot("after_backward")
    if on_grads is not None:
        on_grads(network)
    optimizer.step(lr)
    ledger.snapshot("optimizer_peak")
    ledger.free(xt.nbytes, AllocCategory.INPUT, "input")
    acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    return float(loss.item()), acc, ledger.points()


def evaluate(network: Module, ds: Dataset, config: TrainConfig) -> tuple[float, float]:
    network.eval()
    total_loss, correct = 0.0, 0
    try:
        for x, y in iterate_batches(ds, config.batch_size, fixed_order=True, mean=config.mean, std=config.std,
                                    dtype=DTYPES[config.dtype].type):
            logits = network(Tensor(x, AllocCategory.INPUT, dtype=config.dtype))
            loss = cross_entropy(logits, y)
            total_loss += float(loss.item()) * len(y)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    finally:
        network.train()
    return total_loss / len(ds), correct / len(ds)


def train(network: Module, dataset: Dataset, config: TrainConfig, *, ledger: MemoryLedger | None = None,
          test_set: Dataset | None = None, on_step: Callable | None = None,
          on_grads: Callable | None = None) -> TrainResult:
    """Run ``config.epochs`` epochs of SGD.

    ``on_grads(epoch, step, last_in_epoch, network)`` is called after every
    backward pass, before the optimizer step.  ``on_step(record)`` receives
    each logged :class:`MetricsRecord`.
    """
    ledger = ledger if ledger is not None else MemoryLedger(record_events=False)
    if not ledger.snapshots and ledger.total == 0:
        track_parameters(network, ledger)
        ledger.snapshot("model_init")
    optimizer = SGD(network.parameters(), config.momentum, config.weight_decay, ledger)
    result = TrainResult(network, ledger=ledger)
    network.train()
    dt = DTYPES[config.dtype].type
    n_batches = -(-len(dataset) // config.batch_size) if not config.drop_last else len(dataset) // config.batch_size
    step = 0
    for epoch in range(config.epochs):
        lr = step_lr(epoch, config.lr, config.gamma, config.decay_interval)
        losses, accs, sizes = [], [], []
        batches = iterate_batches(dataset, config.batch_size, epoch=epoch, seed=config.seed,
                                  fixed_order=config.fixed_order, augment=config.augment, mean=config.mean,
                                  std=config.std, drop_last=config.drop_last, dtype=dt)
        for i, (x, y) in enumerate(batches):
            hook = None
            if on_grads is not None:
                last = i == n_batches - 1

                def hook(net, _e=epoch, _s=step, _l=last):
                    on_grads(_e, _s, _l, net)
            loss, acc, points = train_step(network, optimizer, x, y, lr, ledger, dtype=config.dtype,
                                           mark_model_init=(i == 0 and epoch > 0), on_grads=hook)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch} step {step}")
            if i == 0:
                result.points.append(points)
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(y))
            if step % config.log_interval == 0:
                rec = MetricsRecord(epoch, step, "train", loss, acc, lr, points.forward_peak.total)
                result.metrics.append(rec)
                if on_step:
                    on_step(rec)
            step += 1
        optimizer.zero_grad()
        w = np.asarray(sizes, dtype=np.float64)
        rec = MetricsRecord(epoch, step, "train_epoch", float(np.dot(losses, w) / w.sum()),
                            float(np.dot(accs, w) / w.sum()), lr, result.points[-1].forward_peak.total)
        result.metrics.append(rec)
        log.info("epoch %d loss %.4f acc %.4f", epoch, rec.loss, rec.acc)
        if on_step:
            on_step(rec)
        if test_set is not None:
            tl, ta = evaluate(network, test_set, config)
            rec = MetricsRecord(epoch, step, "test", tl, ta, lr, 0)
            result.metrics.append(rec)
            if on_step:
                on_step(rec)
    return result


def write_metrics(fh: TextIO, records: Iterable[MetricsRecord]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow(r.row())
