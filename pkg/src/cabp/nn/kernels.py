"""Forward/backward kernels on plain numpy arrays (NCHW layout).

Convolution is cross-correlation, computed with an im2col matrix product.
Every reduction runs in a fixed order so repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cabp.compression import CompressedActivation, inflate

__all__ = [
    "Conv2dSpec",
    "SavePolicy",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_bias",
    "conv2d_backward_weight",
    "batchnorm2d_forward",
    "batchnorm2d_backward",
    "relu_forward",
    "relu_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "global_avgpool_forward",
    "global_avgpool_backward",
    "linear_forward",
    "linear_backward",
    "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        for name in ("kernel", "stride", "padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding in {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"non-positive conv output size {ho}x{wo} for input {h}x{w}")
        return ho, wo


@dataclass(frozen=True)
class SavePolicy:
    """How a convolution stores its input for the backward pass.

    ``k is None`` means Full storage; otherwise the input is average-pooled
    with kernel ``k`` before it is saved.
    """

    k: tuple[int, int] | None = None

    def __post_init__(self):
        if self.k is not None:
            k = _pair(self.k)
            if min(k) < 1:
                raise ValueError(f"pooling kernel must be >= 1, got {k}")
            object.__setattr__(self, "k", k)

    @classmethod
    def full(cls) -> "SavePolicy":
        return cls(None)

    @classmethod
    def pooled(cls, kh: int, kw: int | None = None) -> "SavePolicy":
        return cls((kh, kh if kw is None else kw))

    @property
    def is_full(self) -> bool:
        return self.k is None

    def __str__(self) -> str:
        return "full" if self.k is None else f"{self.k[0]}x{self.k[1]}"


# -- convolution ---------------------------------------------------------
def _check_conv_input(x: np.ndarray, spec: Conv2dSpec) -> None:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"conv input shape {x.shape} does not match in_channels={spec.in_channels}")


def _im2col(x: np.ndarray, spec: Conv2dSpec) -> tuple[np.ndarray, int, int]:
    """Column matrix of shape (C*kh*kw, N*Ho*Wo); spatial positions are innermost."""
    n, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.output_hw(h, w)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1: sh, : (wo - 1) * sw + 1: sw]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: Conv2dSpec) -> np.ndarray:
    _check_conv_input(x, spec)
    if w.shape != spec.weight_shape:
        raise ValueError(f"weight shape {w.shape} != {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {b.shape} != {(spec.out_channels,)}")
    n = x.shape[0]
    cols, ho, wo = _im2col(x, spec)
    y = w.reshape(spec.out_channels, -1) @ cols
    y = np.ascontiguousarray(y.reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3))
    if b is not None:
        y += b.reshape(1, -1, 1, 1)
    return y


def _dy_matrix(dy: np.ndarray, spec: Conv2dSpec) -> np.ndarray:
    """(O, N*Ho*Wo) view of an NCHW output gradient."""
    if dy.ndim != 4 or dy.shape[1] != spec.out_channels:
        raise ValueError(f"output gradient shape {dy.shape} does not match out_channels={spec.out_channels}")
    return np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(spec.out_channels, -1)


def conv2d_backward_input(dy: np.ndarray, w: np.ndarray, spec: Conv2dSpec,
                          input_hw: tuple[int, int]) -> np.ndarray:
    """dL/dX from the weights and dL/dY alone; never touches the saved input."""
    h, wd = input_hw
    ho, wo = spec.output_hw(h, wd)
    if dy.shape[2:] != (ho, wo):
        raise ValueError(f"output gradient spatial size {dy.shape[2:]} != {(ho, wo)}")
    n = dy.shape[0]
    c = spec.in_channels
    (kh, kw), (sh, sw), (ph, pw) = spec.kernel, spec.stride, spec.padding
    dcols = (w.reshape(spec.out_channels, -1).T @ _dy_matrix(dy, spec)).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i: i + sh * (ho - 1) + 1: sh, j: j + sw * (wo - 1) + 1: sw] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dxp[:, :, ph: ph + h, pw: pw + wd])


def conv2d_backward_bias(dy: np.ndarray) -> np.ndarray:
    if dy.ndim != 4:
        raise ValueError(f"expected NCHW gradient, got shape {dy.shape}")
    return dy.sum(axis=(0, 2, 3))


def conv2d_backward_weight(saved, dy: np.ndarray, spec: Conv2dSpec,
                           policy: SavePolicy | None = None) -> np.ndarray:
    """dL/dW from the saved input or its inflated pooled surrogate.

    A :class:`CompressedActivation` is inflated to the original shape and
    then fed to exactly the same computation as a full input.
    """
    if isinstance(saved, CompressedActivation):
        if policy is not None and (policy.is_full or policy.k != saved.k):
            raise ValueError(f"saved activation was pooled with {saved.k} but policy is {policy}")
        x = inflate(saved)
    else:
        if policy is not None and not policy.is_full:
            raise ValueError(f"policy {policy} expects a compressed activation, got a full tensor")
        x = np.asarray(getattr(saved, "data", saved))
    _check_conv_input(x, spec)
    cols, ho, wo = _im2col(x, spec)
    if dy.shape[2:] != (ho, wo) or dy.shape[0] != x.shape[0]:
        raise ValueError(f"output gradient shape {dy.shape} inconsistent with input {x.shape}")
    dw = _dy_matrix(dy, spec) @ cols.T
    return dw.reshape(spec.weight_shape)


# -- batch norm ----------------------------------------------------------
def batchnorm2d_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Training-mode batch norm; returns (y, mean, biased var, inv_std)."""
    if x.ndim != 4:
        raise ValueError(f"batch norm expects NCHW, got {x.shape}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ValueError("batch norm over a zero-size batch")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(1, -1, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std.reshape(1, -1, 1, 1)
    y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return y, mean, var, inv_std


def batchnorm2d_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                         mean: np.ndarray, inv_std: np.ndarray):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    inv = inv_std.reshape(1, -1, 1, 1)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma.reshape(1, -1, 1, 1)
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


# -- relu ----------------------------------------------------------------
def relu_forward(x: np.ndarray):
    mask = ~(x <= 0)  # NaN passes through so divergence stays visible
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, dy.dtype.type(0))


# -- max pool ------------------------------------------------------------
def maxpool2d_forward(x: np.ndarray, kernel=3, stride=2, padding=1):
    """Returns (y, idx) where idx is the uint8 flat position inside each window."""
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    if kh * kw > 256:
        raise ValueError("max pool window too large for uint8 indices")
    n, c, h, w = x.shape
    ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive max pool output size for input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * sh + 1: sh, : (wo - 1) * sw + 1: sw]
    win = win.reshape(n, c, ho, wo, kh * kw)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.uint8)


def maxpool2d_backward(dy: np.ndarray, idx: np.ndarray, input_shape, kernel=3, stride=2, padding=1):
    (kh, kw), (sh, sw), (ph, pw) = _pair(kernel), _pair(stride), _pair(padding)
    n, c, h, w = input_shape
    ho, wo = dy.shape[2:]
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dy.dtype)
    zero = dy.dtype.type(0)
    for i in range(kh):
        for j in range(kw):
            hit = idx == i * kw + j
            dxp[:, :, i: i + sh * (ho - 1) + 1: sh, j: j + sw * (wo - 1) + 1: sw] += np.where(hit, dy, zero)
    return np.ascontiguousarray(dxp[:, :, ph: ph + h, pw: pw + w])


# -- global average pool -------------------------------------------------
def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    if x.shape[2] * x.shape[3] == 0:
        raise ValueError("global average pool over an empty spatial grid")
    return x.mean(axis=(2, 3))


def global_avgpool_backward(dy: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    g = dy / dy.dtype.type(h * w)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], input_shape))


# -- linear --------------------------------------------------------------
def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear input {x.shape} does not match weight {w.shape}")
    y = x @ w.T
    if b is not None:
        y += b
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


# -- loss ----------------------------------------------------------------
def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch; returns (loss, probabilities)."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"logits must be a non-empty (N, C) array, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != {(n,)}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss, dtype=logits.dtype), np.exp(logp)


def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray, gout) -> np.ndarray:
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1
    return d * (np.asarray(gout, dtype=probs.dtype) / probs.dtype.type(n))
