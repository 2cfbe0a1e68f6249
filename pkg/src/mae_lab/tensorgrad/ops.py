"""Differentiable ops. Each returns a new Tensor and records its vjp."""

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        a = as_tensor(a)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    a = as_tensor(a)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return Tensor._from_op(ad * bd, (a, b), vjp, "mul")


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=()):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def sum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(out, (a,), vjp, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / float(n))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(out, tuple(tensors), vjp, "concat")


def take(a, index):
    """Gather along axis 0: ``a.data[index]`` for an integer index array.

    Duplicate indices are allowed; their gradients accumulate.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError("take index out of range")
    out = a.data[index]
    src_shape = a.shape

    def vjp(g):
        width = int(np.prod(src_shape[1:], dtype=np.int64))
        acc = np.zeros((src_shape[0], width))
        kernels.scatter_add_rows(acc, index.ravel(), g.reshape(-1, width))
        return (acc.reshape(src_shape),)

    return Tensor._from_op(out, (a,), vjp, "take")


def take_rows(a, index):
    """Per-batch row gather: ``out[b, m] = a[b, index[b, m]]`` for 3-D ``a``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    bsz, n = a.shape[0], a.shape[1]
    if index.ndim != 2 or index.shape[0] != bsz:
        raise ValueError("take_rows index must be (batch, m)")
    flat = reshape(a, (bsz * n,) + a.shape[2:])
    offsets = (np.arange(bsz, dtype=np.int64) * n)[:, None]
    return take(flat, index + offsets)


# ------------------------------------------------------------ nonlinearities

def gelu(a):
    a = as_tensor(a)
    x = a.data
    return Tensor._from_op(kernels.gelu_fwd(x), (a,), lambda g: (kernels.gelu_bwd(x, g),), "gelu")


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def abs(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def square(a):
    a = as_tensor(a)
    x = a.data
    return Tensor._from_op(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def layer_norm(a, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    shape = a.shape
    width = shape[-1]
    y, xhat, rstd = kernels.layernorm_fwd(a.data.reshape(-1, width), gamma.data, beta.data, eps)

    def vjp(g):
        dx, dgamma, dbeta = kernels.layernorm_bwd(g.reshape(-1, width), xhat, rstd, gamma.data)
        return dx.reshape(shape), dgamma, dbeta

    return Tensor._from_op(y.reshape(shape), (a, gamma, beta), vjp, "layer_norm")


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    shape = a.shape
    width = shape[-1]
    y = kernels.softmax_fwd(a.data.reshape(-1, width))

    def vjp(g):
        return (kernels.softmax_bwd(y, g.reshape(-1, width)).reshape(shape),)

    return Tensor._from_op(y.reshape(shape), (a,), vjp, "softmax")


def sigmoid_focal_loss(logits, targets, gamma=2.0):
    """Mean over all entries of ``-(1 - p_t)**gamma * log(p_t)``.

    ``p_t`` is ``sigmoid(z)`` where the target is 1 and ``1 - sigmoid(z)``
    where it is 0. ``log p_t`` is evaluated as ``-softplus(-s*z)`` with
    ``s = 2t - 1`` so large logits never overflow.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ValueError(f"targets shape {t.shape} != logits shape {z.shape}")
    s = 2.0 * t - 1.0
    u = s * z
    # log p_t = -softplus(-u); 1 - p_t = sigmoid(-u)
    log_pt = -(np.maximum(-u, 0.0) + np.log1p(np.exp(-np.abs(u))))
    q = _sigmoid(-u)
    pt = 1.0 - q
    w = q ** gamma
    n = z.size
    loss = np.asarray(-(w * log_pt).sum() / n)

    def vjp(g):
        # d/du [-q^gamma log p_t] with dq/du = -q p_t and dlog p_t/du = q
        if gamma == 0:
            dw = 0.0
        else:
            dw = gamma * q ** (gamma - 1) * (-q * pt)
        du = -(dw * log_pt + w * q)
        return (g * du * s / n,)

    return Tensor._from_op(loss, (logits,), vjp, "focal_loss")
