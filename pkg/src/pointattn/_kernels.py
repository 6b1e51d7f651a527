"""Hot numeric kernels.

The nearest-neighbor scan inside the Chamfer distance uses a
norm-expansion distance matrix built with in-place updates (the gemm
dominates, argmin runs along the contiguous axis). The greedy FPS loop is
compiled with numba when available; both paths follow identical
tie-breaking (first/lowest index), and all reductions are sequential per
row so results are reproducible.
"""

from __future__ import annotations

import numpy as np


def nearest(p: np.ndarray, s: np.ndarray):
    """Index of the nearest s-row for each p-row plus the squared distance.

    The argmin is selected on a fast norm-expansion matrix; the returned
    distances are recomputed from coordinate differences, so identical
    points give exactly zero.
    """
    d = p @ (-2.0 * s.T)
    d += (p * p).sum(axis=1)[:, None]
    d += (s * s).sum(axis=1)[None, :]
    near = d.argmin(axis=1)
    dist = ((p - s[near]) ** 2).sum(axis=1)
    return near, dist


def _fps_numpy(pts: np.ndarray, k: int, start: int) -> np.ndarray:
    sel = np.empty(k, dtype=np.int64)
    sel[0] = start
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    mind[start] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        sel[i] = nxt
        d = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(mind, d, out=mind)
        mind[nxt] = -1.0
    return sel


def _softmax_bwd_numpy(w, gw, scale):
    gw *= w
    gw -= w * gw.sum(axis=1, keepdims=True)
    gw *= scale
    return gw


def _layer_norm_fwd_numpy(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def _layer_norm_bwd_numpy(g, xhat, inv, gain):
    gy = g * gain
    term = gy - gy.mean(axis=1, keepdims=True) \
        - xhat * (gy * xhat).mean(axis=1, keepdims=True)
    term *= inv[:, None]
    return term


def _adam_update_numpy(p, g, m, v, beta1, beta2, c1, c2, lr, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    g[...] = 0


try:
    import numba

    @numba.njit(parallel=True, cache=True)
    def _softmax_bwd_njit(w, gw, scale):  # pragma: no cover
        # gw <- scale * w * (gw - sum_j(gw*w)), rowwise
        for i in numba.prange(w.shape[0]):
            s = 0.0
            for j in range(w.shape[1]):
                s += gw[i, j] * w[i, j]
            for j in range(w.shape[1]):
                gw[i, j] = (gw[i, j] - s) * w[i, j] * scale

    def softmax_bwd(w, gw, scale=1.0):
        """In-place softmax jacobian applied to gw given softmax output w."""
        _softmax_bwd_njit(w, gw, scale)
        return gw

    @numba.njit(parallel=True, cache=True)
    def _ln_fwd_njit(x, gain, bias, eps, out, xhat, inv):  # pragma: no cover
        r, c = x.shape
        for i in numba.prange(r):
            s = 0.0
            for j in range(c):
                s += x[i, j]
            mu = s / c
            vs = 0.0
            for j in range(c):
                d = x[i, j] - mu
                vs += d * d
            iv = 1.0 / np.sqrt(vs / c + eps)
            inv[i] = iv
            for j in range(c):
                h = (x[i, j] - mu) * iv
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]

    def layer_norm_fwd(x, gain, bias, eps):
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(x.shape[0], dtype=x.dtype)
        _ln_fwd_njit(x, gain, bias, eps, out, xhat, inv)
        return out, xhat, inv

    @numba.njit(parallel=True, cache=True)
    def _ln_bwd_njit(g, xhat, inv, gain, gx):  # pragma: no cover
        r, c = g.shape
        for i in numba.prange(r):
            sa = 0.0
            sb = 0.0
            for j in range(c):
                gy = g[i, j] * gain[j]
                sa += gy
                sb += gy * xhat[i, j]
            sa /= c
            sb /= c
            iv = inv[i]
            for j in range(c):
                gy = g[i, j] * gain[j]
                gx[i, j] = iv * (gy - sa - xhat[i, j] * sb)

    def layer_norm_bwd(g, xhat, inv, gain):
        gx = np.empty_like(g)
        _ln_bwd_njit(g, xhat, inv, gain, gx)
        return gx

    @numba.njit(parallel=True, cache=True)
    def _adam_njit(p, g, m, v, beta1, beta2, c1, c2, lr, eps):  # pragma: no cover
        for i in numba.prange(p.size):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
            g[i] = 0.0

    def adam_update(p, g, m, v, beta1, beta2, c1, c2, lr, eps):
        """Fused in-place Adam update over flat views; clears the gradient."""
        _adam_njit(p, g, m, v, beta1, beta2, c1, c2, lr, eps)

    @numba.njit(cache=True)
    def _fps_njit(pts, k, start):  # pragma: no cover - exercised via fps_greedy
        n = pts.shape[0]
        sel = np.empty(k, dtype=np.int64)
        sel[0] = start
        mind = np.empty(n, dtype=pts.dtype)
        for i in range(n):
            dx = pts[i, 0] - pts[start, 0]
            dy = pts[i, 1] - pts[start, 1]
            dz = pts[i, 2] - pts[start, 2]
            mind[i] = (dx * dx + dy * dy) + dz * dz
        mind[start] = -1.0
        for j in range(1, k):
            best = 0
            for i in range(1, n):
                if mind[i] > mind[best]:
                    best = i
            sel[j] = best
            for i in range(n):
                dx = pts[i, 0] - pts[best, 0]
                dy = pts[i, 1] - pts[best, 1]
                dz = pts[i, 2] - pts[best, 2]
                d = (dx * dx + dy * dy) + dz * dz
                if d < mind[i]:
                    mind[i] = d
            mind[best] = -1.0
        return sel

    def fps_greedy(pts: np.ndarray, k: int, start: int) -> np.ndarray:
        return _fps_njit(np.ascontiguousarray(pts), k, start)

except ImportError:  # pragma: no cover
    fps_greedy = _fps_numpy

    def softmax_bwd(w, gw, scale=1.0):
        return _softmax_bwd_numpy(w, gw, scale)

    layer_norm_fwd = _layer_norm_fwd_numpy
    layer_norm_bwd = _layer_norm_bwd_numpy
    adam_update = _adam_update_numpy
