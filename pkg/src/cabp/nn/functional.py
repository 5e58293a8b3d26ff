"""Tape-recording layer operations built on :mod:`cabp.nn.kernels`."""

from __future__ import annotations

import numpy as np

from cabp.autodiff import Node, _record, register_backward
from cabp.compression import compress, inflate
from cabp.nn import kernels as K
from cabp.nn.kernels import Conv2dSpec, SavePolicy
from cabp.tensor import Tensor

__all__ = ["conv2d", "batch_norm2d", "relu", "max_pool2d", "global_avg_pool", "linear", "cross_entropy"]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: Conv2dSpec,
           policy: SavePolicy = SavePolicy(), *, label: str = "conv2d") -> Tensor:
    """Exact convolution; only what is kept for dW depends on ``policy``."""
    y = K.conv2d_forward(x.data, w.data, None if b is None else b.data, spec)
    saved = x if policy.is_full else compress(x.data, policy.k)
    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, saved, y, label=label, spec=spec, policy=policy, input_hw=x.shape[2:])


@register_backward("conv2d")
def _conv2d_backward(node: Node, g):
    spec, policy = node.attrs["spec"], node.attrs["policy"]
    needs = node.needs_input_grad
    w = node.inputs[1]
    dx = K.conv2d_backward_input(g, w.data, spec, node.attrs["input_hw"]) if needs[0] else None
    dw = None
    if needs[1]:
        if policy.is_full:
            dw = K.conv2d_backward_weight(node.saved, g, spec, policy)
        else:
            # the inflated surrogate exists only for the duration of this call
            with node.tape.scratch(int(np.prod(node.saved.original_shape)) * node.saved.z.itemsize,
                                   f"{node.label}.inflate"):
                dw = K.conv2d_backward_weight(node.saved, g, spec, policy)
    if len(node.inputs) == 3:
        db = K.conv2d_backward_bias(g) if needs[2] else None
        return dx, dw, db
    return dx, dw


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 *, training: bool = True, momentum: float = 0.1, eps: float = 1e-5,
                 label: str = "batch_norm2d") -> Tensor:
    """Batch statistics in training (updating running stats in place), running stats otherwise."""
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + x.dtype.type(eps))
        scale = (gamma.data * inv_std).astype(x.dtype, copy=False)
        shift = (beta.data - running_mean * scale).astype(x.dtype, copy=False)
        y = x.data * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)
        return Tensor(y, x.category)
    y, mean, var, inv_std = K.batchnorm2d_forward(x.data, gamma.data, beta.data, eps)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    unbiased = var * (m / (m - 1)) if m > 1 else var
    running_mean *= 1 - momentum
    running_mean += momentum * mean
    running_var *= 1 - momentum
    running_var += momentum * unbiased
    return _record("batch_norm2d", (x, gamma, beta), (x, mean, inv_std), y, label=label)


@register_backward("batch_norm2d")
def _batch_norm2d_backward(node: Node, g):
    x, mean, inv_std = node.saved
    gamma = node.inputs[1]
    return K.batchnorm2d_backward(g, x.data, gamma.data, mean, inv_std)


def relu(x: Tensor, *, label: str = "relu") -> Tensor:
    y, mask = K.relu_forward(x.data)
    return _record("relu", (x,), mask, y, label=label)


@register_backward("relu")
def _relu_backward(node: Node, g):
    return K.relu_backward(g, node.saved)


def max_pool2d(x: Tensor, kernel=3, stride=2, padding=1, *, label: str = "max_pool2d") -> Tensor:
    y, idx = K.maxpool2d_forward(x.data, kernel, stride, padding)
    return _record("max_pool2d", (x,), idx, y, label=label,
                   shape=x.shape, kernel=kernel, stride=stride, padding=padding)


@register_backward("max_pool2d")
def _max_pool2d_backward(node: Node, g):
    a = node.attrs
    return K.maxpool2d_backward(g, node.saved, a["shape"], a["kernel"], a["stride"], a["padding"])


def global_avg_pool(x: Tensor, *, label: str = "global_avg_pool") -> Tensor:
    return _record("global_avg_pool", (x,), None, K.global_avgpool_forward(x.data), label=label, shape=x.shape)


@register_backward("global_avg_pool")
def _global_avg_pool_backward(node: Node, g):
    return K.global_avgpool_backward(g, node.attrs["shape"])


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, *, label: str = "linear") -> Tensor:
    y = K.linear_forward(x.data, w.data, None if b is None else b.data)
    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", inputs, x, y, label=label)


@register_backward("linear")
def _linear_backward(node: Node, g):
    x, w = node.saved, node.inputs[1]
    dx, dw, db = K.linear_backward(g, x.data, w.data)
    return (dx, dw, db) if len(node.inputs) == 3 else (dx, dw)


def cross_entropy(logits: Tensor, labels, *, label: str = "cross_entropy") -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    loss, probs = K.softmax_cross_entropy(logits.data, labels)
    return _record("cross_entropy", (logits,), (probs, labels), loss, label=label)


@register_backward("cross_entropy")
def _cross_entropy_backward(node: Node, g):
    probs, labels = node.saved
    return K.softmax_cross_entropy_backward(probs, labels, g)


def inflated_input(node: Node) -> np.ndarray:
    """Full-size view of what a conv node kept for backward (debug helper)."""
    saved = node.saved
    return saved.data if isinstance(saved, Tensor) else inflate(saved)
