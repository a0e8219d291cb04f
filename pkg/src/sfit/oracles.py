"""Float64 brute-force reference implementations.

These use explicit loops over matrix entries and never call into
:mod:`sfit.losses`, so they can check the vectorized torch code.
"""
from __future__ import annotations

import math

import numpy as np


def kl(p_target, p_source) -> float:
    """Batch-mean KL(p_target || p_source) with 0 * log 0 = 0."""
    p_target = np.asarray(p_target, dtype=np.float64)
    p_source = np.asarray(p_source, dtype=np.float64)
    total = 0.0
    for row_t, row_s in zip(p_target, p_source):
        for a, b in zip(row_t, row_s):
            if a > 0:
                total += a * (math.log(a) - math.log(max(b, 1e-8)))
    return total / len(p_target)


def gram(flat) -> np.ndarray:
    flat = np.asarray(flat, dtype=np.float64)
    d, n = flat.shape
    g = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            g[i, j] = sum(flat[i, k] * flat[j, k] for k in range(n))
    return g


def normalize_rows(g, eps: float = 1e-8) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    out = np.zeros_like(g)
    for i, row in enumerate(g):
        norm = math.sqrt(sum(v * v for v in row))
        out[i] = row / max(norm, eps)
    return out


def _sq_frobenius(a, b) -> float:
    return float(sum((x - y) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))))


def _as_batch(f):
    f = np.asarray(f, dtype=np.float64)
    return f[None] if f.ndim == 3 else f


def rp(f_target, f_source) -> float:
    vals = []
    for ft, fs in zip(_as_batch(f_target), _as_batch(f_source)):
        d = ft.shape[0]
        gt = normalize_rows(gram(ft.reshape(d, -1)))
        gs = normalize_rows(gram(fs.reshape(d, -1)))
        vals.append(_sq_frobenius(gs, gt) / d)
    return float(np.mean(vals))


def style(f_target, f_source) -> float:
    vals = []
    for ft, fs in zip(_as_batch(f_target), _as_batch(f_source)):
        d = ft.shape[0]
        vals.append(_sq_frobenius(gram(fs.reshape(d, -1)), gram(ft.reshape(d, -1))) / d**2)
    return float(np.mean(vals))


def batch_similarity(q_target, q_source) -> float:
    q_t = np.asarray(q_target, dtype=np.float64)
    q_s = np.asarray(q_source, dtype=np.float64)
    if q_t.ndim == 4:
        q_t, q_s = q_t.mean(axis=(2, 3)), q_s.mean(axis=(2, 3))
    a_t = normalize_rows(gram(q_t))
    a_s = normalize_rows(gram(q_s))
    return _sq_frobenius(a_s, a_t) / len(q_s)


def pixel_similarity(f_target, f_source) -> float:
    vals = []
    for ft, fs in zip(_as_batch(f_target), _as_batch(f_source)):
        d = ft.shape[0]
        pt = normalize_rows(gram(ft.reshape(d, -1).T))
        ps = normalize_rows(gram(fs.reshape(d, -1).T))
        vals.append(_sq_frobenius(ps, pt) / pt.shape[0])
    return float(np.mean(vals))


def mean_abs(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    return float(sum(abs(x - y) for x, y in zip(a, b)) / len(a))


def mean_sq(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    return float(sum((x - y) ** 2 for x, y in zip(a, b)) / len(a))


def neg_entropy_of_mean(probs) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    mean = [sum(col) / len(probs) for col in probs.T]
    return float(sum(m * math.log(m) for m in mean if m > 0))


def pseudo_label(p_target, y_source, y_target) -> float:
    losses = [-math.log(max(float(row[yt]), 1e-8)) for row, ys, yt in zip(p_target, y_source, y_target) if ys == yt]
    return float(np.mean(losses)) if losses else 0.0


def bn_stats(batch_stats, running_stats) -> float:
    total = 0.0
    for (mu, var), (mu_r, var_r) in zip(batch_stats, running_stats):
        total += _sq_frobenius(mu, mu_r) + _sq_frobenius(var, var_r)
    return total


def central_difference(fn, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad
