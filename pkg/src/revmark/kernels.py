"""Hot numeric kernels: mini-batch SGD for the dense classifiers and kNN distances.

Kernels are JIT-compiled with numba by default; set ``REVMARK_NUMBA=0`` (or
``false``/``no``) to select the pure-numpy fallback. Both paths implement the
same arithmetic and are individually deterministic; ``benchmarks/bench_kernels.py``
compares them.
"""

from __future__ import annotations

import os

import numpy as np


def _sgd_steps_numpy(w1, b1, w2, b2, x, y, sched, lr):
    """One ReLU hidden layer + softmax cross-entropy, trained in place.

    x: (n, d) float64; y: (n,) int64; sched: (steps, batch) int64 row indices.
    Returns the per-step mean loss.
    """
    n_steps, batch = sched.shape
    losses = np.empty(n_steps)
    rows = np.arange(batch)
    for s in range(n_steps):
        idx = sched[s]
        xb = x[idx]
        yb = y[idx]
        pre = xb @ w1 + b1
        hid = np.maximum(pre, 0.0)
        logits = hid @ w2 + b2
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        losses[s] = -np.mean(np.log(p[rows, yb] + 1e-300))
        p[rows, yb] -= 1.0
        p /= batch
        dw2 = hid.T @ p
        db2 = p.sum(axis=0)
        dh = p @ w2.T
        dh[pre <= 0.0] = 0.0
        dw1 = xb.T @ dh
        db1 = dh.sum(axis=0)
        w1 -= lr * dw1
        b1 -= lr * db1
        w2 -= lr * dw2
        b2 -= lr * db2
    return losses


def _pairwise_sq_dists_numpy(a, b):
    """Squared Euclidean distances between the rows of a (n, d) and b (m, d)."""
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    d = aa + bb - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


_sgd_steps_numba = None
_pairwise_sq_dists_numba = None

try:
    from numba import njit

    @njit(cache=True)
    def _sgd_steps_numba(w1, b1, w2, b2, x, y, sched, lr):  # noqa: F811
        n_steps, batch = sched.shape
        d = x.shape[1]
        n_hidden = w1.shape[1]
        n_out = w2.shape[1]
        losses = np.empty(n_steps)
        xb = np.empty((batch, d))
        for s in range(n_steps):
            for i in range(batch):
                xb[i, :] = x[sched[s, i], :]
            pre = xb @ w1
            for i in range(batch):
                for j in range(n_hidden):
                    pre[i, j] += b1[j]
            hid = np.maximum(pre, 0.0)
            p = hid @ w2
            loss = 0.0
            for i in range(batch):
                mx = p[i, 0] + b2[0]
                for k in range(n_out):
                    p[i, k] += b2[k]
                    if p[i, k] > mx:
                        mx = p[i, k]
                total = 0.0
                for k in range(n_out):
                    p[i, k] = np.exp(p[i, k] - mx)
                    total += p[i, k]
                for k in range(n_out):
                    p[i, k] /= total
                yi = y[sched[s, i]]
                loss -= np.log(p[i, yi] + 1e-300)
                p[i, yi] -= 1.0
                for k in range(n_out):
                    p[i, k] /= batch
            losses[s] = loss / batch
            dw2 = np.ascontiguousarray(hid.T) @ p
            db2 = np.empty(n_out)
            for k in range(n_out):
                acc = 0.0
                for i in range(batch):
                    acc += p[i, k]
                db2[k] = acc
            dh = p @ np.ascontiguousarray(w2.T)
            for i in range(batch):
                for j in range(n_hidden):
                    if pre[i, j] <= 0.0:
                        dh[i, j] = 0.0
            dw1 = np.ascontiguousarray(xb.T) @ dh
            db1 = np.empty(n_hidden)
            for j in range(n_hidden):
                acc = 0.0
                for i in range(batch):
                    acc += dh[i, j]
                db1[j] = acc
            for a in range(d):
                for j in range(n_hidden):
                    w1[a, j] -= lr * dw1[a, j]
            for j in range(n_hidden):
                b1[j] -= lr * db1[j]
                for k in range(n_out):
                    w2[j, k] -= lr * dw2[j, k]
            for k in range(n_out):
                b2[k] -= lr * db2[k]
        return losses

    @njit(cache=True)
    def _pairwise_sq_dists_numba(a, b):  # noqa: F811
        n = a.shape[0]
        m = b.shape[0]
        d = a.shape[1]
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    acc += diff * diff
                out[i, j] = acc
        return out

except ImportError:
    pass


def _numba_enabled() -> bool:
    flag = os.environ.get("REVMARK_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no") and _sgd_steps_numba is not None


if _numba_enabled():
    _BACKEND = "numba"
    sgd_steps = _sgd_steps_numba
    pairwise_sq_dists = _pairwise_sq_dists_numba
else:
    _BACKEND = "numpy"
    sgd_steps = _sgd_steps_numpy
    pairwise_sq_dists = _pairwise_sq_dists_numpy


def backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _BACKEND
