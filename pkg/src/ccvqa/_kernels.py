"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with the same signature. The numba path is used when numba is
importable and ``CCVQA_DISABLE_NUMBA`` is unset (or ``0``); set
``CCVQA_DISABLE_NUMBA=1`` to force the numpy path.

Kernels operate on 2-D C-contiguous arrays; callers reshape N-D inputs so
the reduced axis is last.
"""

from __future__ import annotations

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
HIST_BINS = 8


def _env_disabled() -> bool:
    return os.environ.get("CCVQA_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")


try:
    if _env_disabled():
        raise ImportError("numba disabled by CCVQA_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def np_rgb_histogram(pixels):
    idx = np.floor(np.minimum(pixels, 1.0 - 1e-9) * HIST_BINS).astype(np.int64)
    idx = np.clip(idx, 0, HIST_BINS - 1)
    flat = (idx[:, 0] * HIST_BINS + idx[:, 1]) * HIST_BINS + idx[:, 2]
    counts = np.bincount(flat, minlength=HIST_BINS**3).astype(np.float64)
    return counts / pixels.shape[0]


def np_l1_cdist(a, b):
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def np_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_layer_norm_rows(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def np_layer_norm_rows_backward(xhat, rstd, g):
    gm = g.mean(axis=1, keepdims=True)
    gxm = (g * xhat).mean(axis=1, keepdims=True)
    return (g - gm - xhat * gxm) * rstd[:, None]


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def np_gelu_backward(x, g):
    u = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_rgb_histogram(pixels):
        out = np.zeros(HIST_BINS**3)
        n = pixels.shape[0]
        for p in range(n):
            r = int(min(pixels[p, 0], 1.0 - 1e-9) * HIST_BINS)
            g = int(min(pixels[p, 1], 1.0 - 1e-9) * HIST_BINS)
            b = int(min(pixels[p, 2], 1.0 - 1e-9) * HIST_BINS)
            r = min(max(r, 0), HIST_BINS - 1)
            g = min(max(g, 0), HIST_BINS - 1)
            b = min(max(b, 0), HIST_BINS - 1)
            out[(r * HIST_BINS + g) * HIST_BINS + b] += 1.0
        return out / n

    @njit(cache=True)
    def nb_l1_cdist(a, b):
        n, m = a.shape
        k = b.shape[0]
        out = np.zeros((n, k))
        for i in range(n):
            for j in range(k):
                s = 0.0
                for t in range(m):
                    s += abs(a[i, t] - b[j, t])
                out[i, j] = s
        return out

    @njit(cache=True)
    def nb_softmax_rows(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(n):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def nb_softmax_rows_backward(y, g):
        rows, n = y.shape
        out = np.empty_like(y)
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += g[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def nb_layer_norm_rows(x, eps):
        rows, n = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                c = x[i, j] - mean
                var += c * c
            var /= n
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(n):
                xhat[i, j] = (x[i, j] - mean) * r
        return xhat, rstd

    @njit(cache=True)
    def nb_layer_norm_rows_backward(xhat, rstd, g):
        rows, n = xhat.shape
        out = np.empty_like(xhat)
        for i in range(rows):
            gm = 0.0
            gxm = 0.0
            for j in range(n):
                gm += g[i, j]
                gxm += g[i, j] * xhat[i, j]
            gm /= n
            gxm /= n
            for j in range(n):
                out[i, j] = (g[i, j] - gm - xhat[i, j] * gxm) * rstd[i]
        return out

    # 0.5 * (1 + tanh(u)) == 1 / (1 + exp(-2u)); exp vectorises where tanh does not.
    # fastmath without nnan/ninf so exp overflow still yields inf -> 0.
    _FAST = {"nsz", "arcp", "contract", "afn", "reassoc"}

    @njit(cache=True, fastmath=_FAST)
    def nb_gelu(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            out[i] = v / (1.0 + math.exp(-2.0 * GELU_C * (v + GELU_A * v * v * v)))
        return out.reshape(x.shape)

    @njit(cache=True, fastmath=_FAST)
    def nb_gelu_backward(x, g):
        fx = x.ravel()
        fg = g.ravel()
        out = np.empty_like(fx)
        for i in range(fx.size):
            v = fx[i]
            s = 1.0 / (1.0 + math.exp(-2.0 * GELU_C * (v + GELU_A * v * v * v)))
            du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            # d/dv [v * s] with ds/du = 2 s (1 - s)
            out[i] = fg[i] * (s + 2.0 * v * s * (1.0 - s) * du)
        return out.reshape(x.shape)


NUMPY_KERNELS = {
    "rgb_histogram": np_rgb_histogram,
    "l1_cdist": np_l1_cdist,
    "softmax_rows": np_softmax_rows,
    "softmax_rows_backward": np_softmax_rows_backward,
    "layer_norm_rows": np_layer_norm_rows,
    "layer_norm_rows_backward": np_layer_norm_rows_backward,
    "gelu": np_gelu,
    "gelu_backward": np_gelu_backward,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "rgb_histogram": nb_rgb_histogram,
        "l1_cdist": nb_l1_cdist,
        "softmax_rows": nb_softmax_rows,
        "softmax_rows_backward": nb_softmax_rows_backward,
        "layer_norm_rows": nb_layer_norm_rows,
        "layer_norm_rows_backward": nb_layer_norm_rows_backward,
        "gelu": nb_gelu,
        "gelu_backward": nb_gelu_backward,
    }
    ACTIVE = NUMBA_KERNELS
    BACKEND = "numba"
else:
    NUMBA_KERNELS = {}
    ACTIVE = NUMPY_KERNELS
    BACKEND = "numpy"


def rgb_histogram(pixels):
    return ACTIVE["rgb_histogram"](np.ascontiguousarray(pixels, dtype=np.float64))


def l1_cdist(a, b):
    return ACTIVE["l1_cdist"](
        np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64)
    )


def softmax_rows(x):
    return ACTIVE["softmax_rows"](np.ascontiguousarray(x))


def softmax_rows_backward(y, g):
    return ACTIVE["softmax_rows_backward"](np.ascontiguousarray(y), np.ascontiguousarray(g))


def layer_norm_rows(x, eps):
    return ACTIVE["layer_norm_rows"](np.ascontiguousarray(x), x.dtype.type(eps))


def layer_norm_rows_backward(xhat, rstd, g):
    return ACTIVE["layer_norm_rows_backward"](
        np.ascontiguousarray(xhat), np.ascontiguousarray(rstd), np.ascontiguousarray(g)
    )


def gelu(x):
    return ACTIVE["gelu"](np.ascontiguousarray(x))


def gelu_backward(x, g):
    return ACTIVE["gelu_backward"](np.ascontiguousarray(x), np.ascontiguousarray(g))
