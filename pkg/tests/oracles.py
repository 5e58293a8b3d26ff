"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np

from cabp import autodiff as ad
from cabp.autodiff import Tape
from cabp.ledger import MemoryLedger
from cabp.nn import functional as F
from cabp.nn.kernels import Conv2dSpec, SavePolicy
from cabp.tensor import Tensor

FD_STEP = 1e-5
GRAD_RTOL = 1e-6
# denominators below this are treated as this; keeps 0/0 out of the ratio
GRAD_FLOOR = 1e-3


def conv2d_loops(x, w, b, stride=(1, 1), padding=(0, 0)):
    """Direct 7-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, ph: ph + h, pw: pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    y = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, i * sh + u, j * sw + v] * w[oi, ci, u, v]
                    y[ni, oi, i, j] = acc + (b[oi] if b is not None else 0.0)
    return y


def conv2d_weight_grad_loops(x, dy, kernel, stride=(1, 1), padding=(0, 0)):
    """dW[o,c,u,v] = sum_{n,i,j} dY[n,o,i,j] * Xpad[n,c,i*sh+u,j*sw+v], by loops."""
    n, c, h, wd = x.shape
    _, o, ho, wo = dy.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, ph: ph + h, pw: pw + wd] = x
    dw = np.zeros((o, c, kh, kw), dtype=x.dtype)
    for oi in range(o):
        for ci in range(c):
            for u in range(kh):
                for v in range(kw):
                    acc = 0.0
                    for ni in range(n):
                        for i in range(ho):
                            for j in range(wo):
                                acc += dy[ni, oi, i, j] * xp[ni, ci, i * sh + u, j * sw + v]
                    dw[oi, ci, u, v] = acc
    return dw


def inflate_loops(z, shape, k):
    """Explicit block replication with clamping for remainder rows/columns."""
    n, c, h, w = shape
    kh, kw = k
    zh, zw = z.shape[2:]
    out = np.empty(shape, dtype=z.dtype)
    for i in range(h):
        for j in range(w):
            out[:, :, i, j] = z[:, :, min(i // kh, zh - 1), min(j // kw, zw - 1)]
    return out


def numeric_grad(f, arrays, idx, h=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[idx]``."""
    x = arrays[idx]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(*arrays)
        flat[i] = old - h
        fm = f(*arrays)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)


def autodiff_grads(build, arrays, wrt):
    """Run ``build(*tensors) -> scalar Tensor`` on a tape; return grads for ``wrt`` indices."""
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt), dtype="f64") for i, a in enumerate(arrays)]
    with Tape(MemoryLedger(record_events=False)) as tape:
        loss = build(*tensors)
    grads = tape.backward(loss)
    return [grads.get(tensors[i], np.zeros_like(arrays[i])) for i in wrt]


def gradcheck(build, arrays, wrt):
    """Max relative error over every element of every checked input."""
    def scalar(*arrs):
        return float(build(*[Tensor(a, dtype="f64") for a in arrs]).item())

    worst = 0.0
    for i, g in zip(wrt, autodiff_grads(build, arrays, wrt)):
        num = numeric_grad(scalar, arrays, i)
        worst = max(worst, float(np.max(rel_error(g, num))))
    return worst


# -- gradcheck cases, one generator per op ---------------------------------
def _proj(rng, shape):
    return rng.uniform(-1, 1, shape)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-30) * margin * 2, x)


def _distinct(rng, shape):
    """Shuffled evenly spaced values in [-1, 1]: no near-ties for max."""
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-1, 1, n)).reshape(shape)


def case_add(rng):
    shape_a = tuple(rng.integers(1, 4, 3))
    shape_b = shape_a if rng.random() < 0.5 else (1,) + shape_a[1:]
    a, b, r = _proj(rng, shape_a), _proj(rng, shape_b), _proj(rng, shape_a)
    return (lambda a, b, r: ad.sum(ad.mul(ad.add(a, b), r))), [a, b, r], (0, 1)


def case_mul(rng):
    shape = tuple(rng.integers(1, 4, 3))
    a, b, r = _proj(rng, shape), _proj(rng, shape), _proj(rng, shape)
    return (lambda a, b, r: ad.sum(ad.mul(ad.mul(a, b), r))), [a, b, r], (0, 1)


def case_scale(rng):
    shape = tuple(rng.integers(1, 5, 2))
    f = float(rng.uniform(-3, 3))
    a, r = _proj(rng, shape), _proj(rng, shape)
    return (lambda a, r: ad.sum(ad.mul(ad.scale(a, f), r))), [a, r], (0,)


def case_sum(rng):
    shape = tuple(rng.integers(2, 5, 3))
    axis = int(rng.integers(0, 3))
    out_shape = tuple(s for i, s in enumerate(shape) if i != axis)
    a, r = _proj(rng, shape), _proj(rng, out_shape)
    return (lambda a, r: ad.sum(ad.mul(ad.sum(a, axis=axis), r))), [a, r], (0,)


def case_max(rng):
    shape = tuple(rng.integers(2, 5, 2))
    axis = int(rng.integers(0, 2))
    out_shape = tuple(s for i, s in enumerate(shape) if i != axis)
    a, r = _distinct(rng, shape), _proj(rng, out_shape)
    return (lambda a, r: ad.sum(ad.mul(ad.max(a, axis=axis), r))), [a, r], (0,)


def case_conv2d(rng):
    n, c, o = (int(v) for v in rng.integers(1, 3, 3))
    k = int(rng.choice([1, 2, 3]))
    s = int(rng.choice([1, 2]))
    p = int(rng.integers(0, k))
    h, w = (int(v) for v in rng.integers(k + 1, 6, 2))
    spec = Conv2dSpec(c, o, k, s, p, has_bias=True)
    x, wt, b = _proj(rng, (n, c, h, w)), _proj(rng, spec.weight_shape), _proj(rng, (o,))
    r = _proj(rng, (n, o, *spec.output_hw(h, w)))
    return (lambda x, wt, b, r: ad.sum(ad.mul(F.conv2d(x, wt, b, spec), r))), [x, wt, b, r], (0, 1, 2)


def case_conv2d_pooled_exact_parts(rng):
    """dX and db of a pooled-policy conv are still the true gradients."""
    n, c, o = (int(v) for v in rng.integers(1, 3, 3))
    spec = Conv2dSpec(c, o, 3, 1, 1, has_bias=True)
    h, w = (int(v) for v in rng.integers(4, 7, 2))
    x, wt, b = _proj(rng, (n, c, h, w)), _proj(rng, spec.weight_shape), _proj(rng, (o,))
    r = _proj(rng, (n, o, h, w))
    pol = SavePolicy.pooled(2)
    return (lambda x, wt, b, r: ad.sum(ad.mul(F.conv2d(x, wt, b, spec, pol), r))), [x, wt, b, r], (0, 2)


def case_batch_norm(rng):
    n = int(rng.integers(2, 5))
    c = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(2, 4, 2))
    x, g, b, r = _proj(rng, (n, c, h, w)), rng.uniform(0.5, 1.5, c), _proj(rng, c), _proj(rng, (n, c, h, w))

    def build(x, g, b, r):
        return ad.sum(ad.mul(F.batch_norm2d(x, g, b, np.zeros(c), np.ones(c)), r))

    return build, [x, g, b, r], (0, 1, 2)


def case_relu(rng):
    shape = tuple(rng.integers(1, 4, 4))
    x, r = _away_from_zero(rng, shape), _proj(rng, shape)
    return (lambda x, r: ad.sum(ad.mul(F.relu(F.relu(x)), r))), [x, r], (0,)


def case_max_pool(rng):
    n, c = (int(v) for v in rng.integers(1, 3, 2))
    h, w = (int(v) for v in rng.integers(3, 7, 2))
    x = _distinct(rng, (n, c, h, w))
    ho, wo = (h + 2 - 3) // 2 + 1, (w + 2 - 3) // 2 + 1
    r = _proj(rng, (n, c, ho, wo))
    return (lambda x, r: ad.sum(ad.mul(F.max_pool2d(x, 3, 2, 1), r))), [x, r], (0,)


def case_global_avg_pool(rng):
    n, c, h, w = (int(v) for v in rng.integers(1, 5, 4))
    x, r = _proj(rng, (n, c, h, w)), _proj(rng, (n, c))
    return (lambda x, r: ad.sum(ad.mul(F.global_avg_pool(x), r))), [x, r], (0,)


def case_linear(rng):
    n, i, o = (int(v) for v in rng.integers(1, 6, 3))
    x, w, b, r = _proj(rng, (n, i)), _proj(rng, (o, i)), _proj(rng, o), _proj(rng, (n, o))
    return (lambda x, w, b, r: ad.sum(ad.mul(F.linear(x, w, b), r))), [x, w, b, r], (0, 1, 2)


def case_cross_entropy(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    logits = rng.uniform(-2, 2, (n, c))
    labels = rng.integers(0, c, n)
    return (lambda z: F.cross_entropy(z, labels)), [logits], (0,)


GRAD_CASES = {
    "add": case_add,
    "mul": case_mul,
    "scale": case_scale,
    "sum": case_sum,
    "max": case_max,
    "conv2d": case_conv2d,
    "conv2d_pooled_dx_db": case_conv2d_pooled_exact_parts,
    "batch_norm2d": case_batch_norm,
    "relu": case_relu,
    "max_pool2d": case_max_pool,
    "global_avg_pool": case_global_avg_pool,
    "linear": case_linear,
    "cross_entropy": case_cross_entropy,
}
INSTANCES_PER_OP = 20


def run_grad_case(name: str, instance: int) -> float:
    rng = np.random.default_rng([sum(map(ord, name)), instance])
    build, arrays, wrt = GRAD_CASES[name](rng)
    return gradcheck(build, arrays, wrt)
