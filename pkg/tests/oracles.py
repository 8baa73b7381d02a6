"""Slow reference implementations written as explicit loops over scalars."""

from __future__ import annotations

import math

import numpy as np


def rel_err(actual, expected) -> float:
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    assert a.shape == b.shape, (a.shape, b.shape)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-12))


def conv2d(x, w, stride, pad):
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for c in range(c_in):
                        for di in range(k):
                            for dj in range(k):
                                y, xx = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[b, c, y, xx] * w[o, c, di, dj]
                    out[b, o, i, j] = s
    return out


def depthwise_temporal_conv(x, w):
    n, t, c, h, wd = x.shape
    k = w.shape[1]
    p = (k - 1) // 2
    out = np.zeros(x.shape)
    for b in range(n):
        for ch in range(c):
            for tt in range(t):
                for j in range(k):
                    src = tt + j - p
                    if 0 <= src < t:
                        for y in range(h):
                            for xx in range(wd):
                                out[b, tt, ch, y, xx] += w[ch, j] * x[b, src, ch, y, xx]
    return out


def temporal_shift(x, fold_fraction):
    n, t, c, h, w = x.shape
    fold = math.floor(c * fold_fraction)
    out = np.zeros(x.shape)
    for b in range(n):
        for tt in range(t):
            for ch in range(c):
                if ch < fold:
                    src = tt - 1
                elif ch < 2 * fold:
                    src = tt + 1
                else:
                    src = tt
                if 0 <= src < t:
                    out[b, tt, ch] = x[b, src, ch]
    return out


def global_avg_pool_spatial(x):
    *lead, h, w = x.shape
    flat = x.reshape(-1, h, w)
    out = np.zeros(len(flat))
    for i, m in enumerate(flat):
        s = 0.0
        for y in range(h):
            for xx in range(w):
                s += m[y, xx]
        out[i] = s / (h * w)
    return out.reshape(lead)


def linear(x, w, b=None):
    d_out, d_in = w.shape
    flat = x.reshape(-1, d_in)
    out = np.zeros((len(flat), d_out))
    for r, row in enumerate(flat):
        for o in range(d_out):
            s = 0.0 if b is None else b[o]
            for i in range(d_in):
                s += w[o, i] * row[i]
            out[r, o] = s
    return out.reshape(*x.shape[:-1], d_out)


def channel_scale(x, s):
    n, t, c, h, w = x.shape
    out = np.zeros(x.shape)
    for b in range(n):
        for tt in range(t):
            for ch in range(c):
                for y in range(h):
                    for xx in range(w):
                        out[b, tt, ch, y, xx] = x[b, tt, ch, y, xx] * s[b, tt, ch]
    return out


def sigmoid(x):
    return np.vectorize(lambda v: 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v)))(x)


def relu(x):
    return np.vectorize(lambda v: v if v > 0 else 0.0)(x)


def softmax_cross_entropy(logits, labels):
    import mpmath

    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for row, y in zip(logits, labels):
        z = sum(mpmath.exp(mpmath.mpf(float(v))) for v in row)
        total += mpmath.log(z) - mpmath.mpf(float(row[y]))
    return float(total / len(labels))


def group_norm(x, gamma, beta, groups, eps=1e-5):
    n, c, h, w = x.shape
    per = c // groups
    out = np.zeros(x.shape)
    for b in range(n):
        for g in range(groups):
            vals = [x[b, ch, y, xx] for ch in range(g * per, (g + 1) * per) for y in range(h) for xx in range(w)]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            for ch in range(g * per, (g + 1) * per):
                for y in range(h):
                    for xx in range(w):
                        out[b, ch, y, xx] = (x[b, ch, y, xx] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def td_loss(z, ratio, eps=1e-8):
    """Sum over the first floor(ratio*C) channels of the mean cosine over ordered frame pairs, batch mean."""
    n, t, c, h, w = z.shape
    c_mu = math.floor(ratio * c)
    total = 0.0
    for b in range(n):
        for ch in range(c_mu):
            acc = 0.0
            for i in range(t):
                for j in range(t):
                    if i == j:
                        continue
                    u, v = z[b, i, ch].ravel(), z[b, j, ch].ravel()
                    nu = max(math.sqrt(sum(a * a for a in u)), eps)
                    nv = max(math.sqrt(sum(a * a for a in v)), eps)
                    cos = sum(a * bb for a, bb in zip(u, v)) / (nu * nv)
                    acc += min(1.0, max(-1.0, cos))
            total += acc / (t * (t - 1))
    return total / n
