"""Reverse-mode differentiation tape.

Operations executed while a :class:`Tape` is active append a :class:`Node`
holding whatever the backward rule needs.  The bytes of that saved payload
are charged to the ledger as ``Activation`` and returned when the node is
replayed (or when the tape is released without a backward pass).
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from cabp.compression import CompressedActivation
from cabp.ledger import MemoryLedger
from cabp.tensor import AllocCategory, Tensor

__all__ = [
    "Tape",
    "Node",
    "TapeStateError",
    "MissingBackwardRule",
    "register_backward",
    "active_tape",
    "payload_nbytes",
    "add",
    "mul",
    "scale",
    "sum",
    "max",
    "compare",
]

_ACTIVE: ContextVar["Tape | None"] = ContextVar("cabp_active_tape", default=None)
_RULES: dict[str, Callable] = {}


class TapeStateError(RuntimeError):
    pass


class MissingBackwardRule(LookupError):
    pass


def register_backward(op_id: str):
    """Register ``fn(node, grad_out) -> tuple of input grads`` for ``op_id``."""

    def deco(fn):
        _RULES[op_id] = fn
        return fn

    return deco


def active_tape() -> "Tape | None":
    return _ACTIVE.get()


def payload_nbytes(payload: Any) -> int:
    if payload is None:
        return 0
    if isinstance(payload, (Tensor, CompressedActivation)):
        return payload.nbytes
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, (tuple, list)):
        return int(np.sum([payload_nbytes(p) for p in payload], dtype=np.int64)) if payload else 0
    if isinstance(payload, dict):
        return payload_nbytes(list(payload.values()))
    raise TypeError(f"cannot size saved payload of type {type(payload).__name__}")


@dataclass(eq=False)
class Node:
    op_id: str
    inputs: tuple
    output: Tensor
    saved: Any
    label: str
    saved_bytes: int
    tape: "Tape"
    attrs: dict = field(default_factory=dict)

    @property
    def needs_input_grad(self) -> tuple[bool, ...]:
        return tuple(isinstance(t, Tensor) and t.requires_grad for t in self.inputs)

    @property
    def ledger(self) -> MemoryLedger:
        return self.tape.ledger


class Tape:
    """Ordered record of a forward pass; use as a context manager.

    >>> with Tape() as tape:
    ...     y = sum(mul(w, x))
    >>> grads = tape.backward(y)
    """

    def __init__(self, ledger: MemoryLedger | None = None):
        self.ledger = ledger if ledger is not None else MemoryLedger()
        self.nodes: list[Node] = []
        self.mode = "forward"
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, op_id: str, inputs, saved, output: Tensor, *, label: str | None = None, **attrs) -> Node:
        if self.mode != "forward":
            raise TapeStateError(f"cannot record '{op_id}' while tape is in {self.mode} mode")
        nbytes = payload_nbytes(saved)
        label = label or op_id
        node = Node(op_id, tuple(inputs), output, saved, label, nbytes, self, attrs)
        self.ledger.alloc(nbytes, AllocCategory.ACTIVATION, label)
        self.nodes.append(node)
        return node

    @contextlib.contextmanager
    def scratch(self, nbytes: int, label: str):
        self.ledger.alloc(nbytes, AllocCategory.SCRATCH, label)
        try:
            yield
        finally:
            self.ledger.free(nbytes, AllocCategory.SCRATCH, label)

    def _release(self, node: Node) -> None:
        if node.saved is not None or node.saved_bytes:
            self.ledger.free(node.saved_bytes, AllocCategory.ACTIVATION, node.label)
        node.saved = None
        node.saved_bytes = 0

    def release(self) -> None:
        """Drop every saved payload without running backward."""
        for node in reversed(self.nodes):
            self._release(node)
        self.nodes.clear()
        self.mode = "done"

    def backward(self, loss: Tensor, loss_grad=None) -> dict:
        """Replay nodes in reverse order and accumulate leaf gradients.

        Returns ``{leaf_tensor: grad}`` for every leaf with ``requires_grad``;
        the same arrays are accumulated into ``leaf.grad``.
        """
        if self.mode != "forward":
            raise TapeStateError(f"backward called on a tape in {self.mode} mode")
        missing = sorted({n.op_id for n in self.nodes if n.op_id not in _RULES})
        if missing:
            raise MissingBackwardRule(f"no backward rule registered for op '{missing[0]}'")
        if loss_grad is None:
            if loss.size != 1:
                raise ValueError(f"loss must be scalar, got shape {loss.shape}")
            loss_grad = np.ones(loss.shape, dtype=loss.dtype)
        self.mode = "backward"
        produced = {id(n.output) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(loss_grad, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        try:
            for node in reversed(self.nodes):
                g = grads.pop(id(node.output), None)
                if g is None:
                    self._release(node)
                    continue
                in_grads = _RULES[node.op_id](node, g)
                if not isinstance(in_grads, tuple):
                    in_grads = (in_grads,)
                self._release(node)
                for t, gi in zip(node.inputs, in_grads):
                    if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                        continue
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                    if key not in produced:
                        leaves[key] = t
        finally:
            self.mode = "done"
        out = {}
        for key, t in leaves.items():
            g = grads[key]
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True)
                self.ledger.alloc(t.grad.nbytes, AllocCategory.GRADIENT, t.name or "grad")
            else:
                t.grad = t.grad + g
            out[t] = t.grad
        self.nodes.clear()
        return out


def _record(op_id: str, inputs, saved, out: np.ndarray, *, label=None, **attrs) -> Tensor:
    tape = _ACTIVE.get()
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    result = Tensor(out, AllocCategory.ACTIVATION, requires_grad=needs and tape is not None)
    if tape is not None and needs:
        tape.record(op_id, inputs, saved, result, label=label, **attrs)
    return result


# -- broadcasting --------------------------------------------------------
def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Broadcast limited to missing or singleton *leading* dimensions.

    One operand is expanded: it must be 1 (or absent) on every dimension up
    to the last one where the shapes disagree.
    """
    a, b = tuple(a), tuple(b)
    if a == b:
        return a
    rank = len(a) if len(a) >= len(b) else len(b)
    pa = (1,) * (rank - len(a)) + a
    pb = (1,) * (rank - len(b)) + b
    last = [i for i in range(rank) if pa[i] != pb[i]][-1]
    if all(d == 1 for d in pa[: last + 1]):
        return pb
    if all(d == 1 for d in pb[: last + 1]):
        return pa
    raise ValueError(f"shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitives ----------------------------------------------------------
def add(a, b, *, label: str | None = None) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    return _record("add", (a, b), None, a.data + b.data, label=label, shapes=(a.shape, b.shape))


@register_backward("add")
def _add_backward(node: Node, g):
    sa, sb = node.attrs["shapes"]
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def mul(a, b, *, label: str | None = None) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    return _record("mul", (a, b), (a, b), a.data * b.data, label=label)


@register_backward("mul")
def _mul_backward(node: Node, g):
    a, b = node.saved
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def scale(a, factor: float, *, label: str | None = None) -> Tensor:
    a = _t(a)
    factor = float(factor)
    return _record("scale", (a,), None, a.data * a.dtype.type(factor), label=label, factor=factor)


@register_backward("scale")
def _scale_backward(node: Node, g):
    return g * g.dtype.type(node.attrs["factor"])


def sum(a, axis=None, *, label: str | None = None) -> Tensor:  # noqa: A001
    a = _t(a)
    if a.size == 0:
        raise ValueError("sum over a zero-size tensor")
    return _record("sum", (a,), None, np.asarray(a.data.sum(axis=axis)), label=label, axis=axis, shape=a.shape)


@register_backward("sum")
def _sum_backward(node: Node, g):
    shape, axis = node.attrs["shape"], node.attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def max(a, axis=None, *, label: str | None = None) -> Tensor:  # noqa: A001
    a = _t(a)
    if a.size == 0:
        raise ValueError("max over a zero-size tensor")
    if axis is None:
        flat = int(np.argmax(a.data))
        out = np.asarray(a.data.reshape(-1)[flat])
        return _record("max", (a,), np.asarray(flat, dtype=np.int64), out, label=label, axis=None, shape=a.shape)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _record("max", (a,), idx, out, label=label, axis=axis, shape=a.shape)


@register_backward("max")
def _max_backward(node: Node, g):
    shape, axis, idx = node.attrs["shape"], node.attrs["axis"], node.saved
    dx = np.zeros(shape, dtype=g.dtype)
    if axis is None:
        dx.reshape(-1)[int(idx)] = g
    else:
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return dx


def compare(a, b, op: str = "gt") -> Tensor:
    """Elementwise comparison as a 0/1 tensor; not differentiable."""
    a, b = _t(a), _t(b)
    _broadcast_shape(a.shape, b.shape)
    fn = {"gt": np.greater, "ge": np.greater_equal, "lt": np.less, "le": np.less_equal, "eq": np.equal}[op]
    return Tensor(fn(a.data, b.data).astype(np.result_type(a.dtype, b.dtype)), AllocCategory.SCRATCH)
