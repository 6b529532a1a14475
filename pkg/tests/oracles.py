"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np

def conv_oracle(x, k, b=None, stride=1, padding=0, dilation=1):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += k[oc, ic, u, v] * xp[i, ic, r * stride + u * dilation, q * stride + v * dilation]
                    out[i, oc, r, q] = acc
    return out


def pool_oracle(x, window, stride, reduce):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    vals = [x[i, ch, r * stride + u, q * stride + v] for u in range(window) for v in range(window)]
                    out[i, ch, r, q] = reduce(vals)
    return out


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def bn_train_oracle(x, gamma, beta, eps=1e-5):
    """Two-pass per-channel statistics over every axis except 1."""
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = np.moveaxis(x, 1, 0)[c].reshape(-1)
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, c] = gamma[c] * (x[:, c] - mu) / math.sqrt(var + eps) + beta[c]
    return out


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def edit_distance_oracle(a, b):
    """Full-table Levenshtein distance."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + (0 if a[i - 1] == b[j - 1] else 1))
    return table[len(a)][len(b)]
