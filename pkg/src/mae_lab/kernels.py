"""Hot elementwise/row kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and ``MAE_LAB_NUMBA`` is not
set to ``0``. Three kernels (softmax forward, GELU forward, midrank) stay on
numpy even then, because the compiled versions measured slower. Both paths
must agree to round-off; ``tests/test_kernels.py`` checks this and
``benchmarks/bench_kernels.py`` times them against each other.

All kernels operate on C-contiguous float64 arrays. Row kernels take 2-D
input of shape (rows, width); callers reshape.
"""

import math
import os

import numpy as np

_WANT_NUMBA = os.environ.get("MAE_LAB_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by MAE_LAB_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


GELU_C = math.sqrt(2.0 / math.pi)
# reassociation and fast approximations only; NaN/Inf semantics are kept so
# the tape's finiteness checks stay meaningful
FAST = {"contract", "arcp", "reassoc", "afn"}


# ---------------------------------------------------------------- numpy path

def layernorm_fwd_np(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd_np(dy, xhat, rstd, gamma):
    dgamma = np.einsum("ij,ij->j", dy, xhat)
    dbeta = dy.sum(axis=0)
    g = dy * gamma
    width = xhat.shape[1]
    dx = (g - g.mean(axis=1, keepdims=True)
          - xhat * (np.einsum("ij,ij->i", g, xhat)[:, None] / width)) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_bwd_np(y, dy):
    s = np.einsum("ij,ij->i", dy, y)[:, None]
    return y * (dy - s)


def gelu_fwd_np(x):
    inner = GELU_C * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd_np(x, dy):
    inner = GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


def patch_stats_np(patches):
    mean = patches.mean(axis=1)
    var = np.mean((patches - mean[:, None]) ** 2, axis=1)
    return mean, var


def midrank_np(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = xs.shape[0]
    ranks = np.empty(n, dtype=np.float64)
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = 0.5 * (starts + ends - 1) + 1.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


# ---------------------------------------------------------------- numba path

@njit(cache=True)
def _layernorm_fwd_nb(x, gamma, beta, eps):
    rows, width = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(rows)
    for i in range(rows):
        mu = 0.0
        for j in range(width):
            mu += x[i, j]
        mu /= width
        var = 0.0
        for j in range(width):
            d = x[i, j] - mu
            var += d * d
        var /= width
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(width):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def _layernorm_bwd_nb(dy, xhat, rstd, gamma):
    rows, width = dy.shape
    dx = np.empty_like(dy)
    dgamma = np.zeros(width)
    dbeta = np.zeros(width)
    for i in range(rows):
        sg = 0.0
        sgx = 0.0
        for j in range(width):
            g = dy[i, j] * gamma[j]
            sg += g
            sgx += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        sg /= width
        sgx /= width
        r = rstd[i]
        for j in range(width):
            dx[i, j] = (dy[i, j] * gamma[j] - sg - xhat[i, j] * sgx) * r
    return dx, dgamma, dbeta


@njit(cache=True, fastmath=FAST)
def _softmax_fwd_nb(x):
    rows, width = x.shape
    y = np.empty_like(x)
    for i in range(rows):
        m = x[i, 0]
        for j in range(1, width):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(width):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(width):
            y[i, j] /= s
    return y


@njit(cache=True)
def _softmax_bwd_nb(y, dy):
    rows, width = y.shape
    dx = np.empty_like(y)
    for i in range(rows):
        s = 0.0
        for j in range(width):
            s += dy[i, j] * y[i, j]
        for j in range(width):
            dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx


@njit(inline="always", fastmath=FAST)
def _tanh(u):
    # libm tanh does not vectorize; exp does under fastmath
    e = math.exp(-2.0 * abs(u))
    t = (1.0 - e) / (1.0 + e)
    return t if u >= 0 else -t


@njit(cache=True, fastmath=FAST)
def _gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + _tanh(GELU_C * (v + 0.044715 * v * v * v)))
    return out.reshape(x.shape)


@njit(cache=True, fastmath=FAST)
def _gelu_bwd_nb(x, dy):
    fx = x.ravel()
    fd = dy.ravel()
    out = np.empty_like(fx)
    for i in range(fx.shape[0]):
        v = fx[i]
        t = _tanh(GELU_C * (v + 0.044715 * v * v * v))
        dinner = GELU_C * (1.0 + 3 * 0.044715 * v * v)
        out[i] = fd[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out.reshape(x.shape)


@njit(cache=True)
def _scatter_add_rows_nb(out, idx, src):
    width = out.shape[1]
    for k in range(idx.shape[0]):
        r = idx[k]
        for j in range(width):
            out[r, j] += src[k, j]
    return out


@njit(cache=True)
def _patch_stats_nb(patches):
    n, k = patches.shape
    mean = np.empty(n)
    var = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += patches[i, j]
        mu = s / k
        acc = 0.0
        for j in range(k):
            d = patches[i, j] - mu
            acc += d * d
        mean[i] = mu
        var[i] = acc / k
    return mean, var


@njit(cache=True)
def _midrank_nb(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


# ---------------------------------------------------------------- dispatch

def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if HAVE_NUMBA:
    def layernorm_fwd(x, gamma, beta, eps):
        return _layernorm_fwd_nb(_c(x), _c(gamma), _c(beta), float(eps))

    def layernorm_bwd(dy, xhat, rstd, gamma):
        return _layernorm_bwd_nb(_c(dy), xhat, rstd, _c(gamma))

    def softmax_bwd(y, dy):
        return _softmax_bwd_nb(y, _c(dy))

    def gelu_bwd(x, dy):
        return _gelu_bwd_nb(x, _c(dy))

    def scatter_add_rows(out, idx, src):
        return _scatter_add_rows_nb(out, np.ascontiguousarray(idx, dtype=np.int64), _c(src))

    def patch_stats(patches):
        return _patch_stats_nb(_c(patches))

    # numpy's vectorized exp/tanh and sort beat the compiled loops here (no
    # SVML in this numba build); see benchmarks/bench_kernels.py
    softmax_fwd = softmax_fwd_np
    gelu_fwd = gelu_fwd_np
    midrank = midrank_np
else:
    layernorm_fwd = layernorm_fwd_np
    layernorm_bwd = layernorm_bwd_np
    softmax_fwd = softmax_fwd_np
    softmax_bwd = softmax_bwd_np
    gelu_fwd = gelu_fwd_np
    gelu_bwd = gelu_bwd_np
    scatter_add_rows = scatter_add_rows_np
    patch_stats = patch_stats_np
    midrank = midrank_np

BACKEND = "numba" if HAVE_NUMBA else "numpy"
