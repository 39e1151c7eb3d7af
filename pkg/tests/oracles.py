"""Independent reference implementations used to cross-check the library.

Written from the defining formulas with plain Python/numpy, sharing no code
with the package.
"""

import math

import numpy as np


def alpha_bar(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def linear_betas(T, lo, hi):
    return [lo + (hi - lo) * k / (T - 1) for k in range(T)]


def positional_encoding(length, dim):
    pe = np.zeros((length, dim))
    for pos in range(length):
        for i in range(0, dim, 2):
            angle = pos / (10000 ** (i / dim))
            pe[pos, i] = math.sin(angle)
            pe[pos, i + 1] = math.cos(angle)
    return pe


def direct_estimate(z, eps, ab):
    return (z - math.sqrt(1 - ab) * eps) / math.sqrt(ab)


def guidance(uncond, lq_only, conds, s_i, s_c):
    """Dual-scale guidance with the conditional branch averaged over references."""
    mean_cond = sum(conds) / len(conds)
    return (1 - s_i) * uncond + (s_i - s_c) * lq_only + s_c * mean_cond


def id_loss(e_target, e_hat, ab):
    cos = float(np.dot(e_target, e_hat) / (np.linalg.norm(e_target) * np.linalg.norm(e_hat)))
    return math.sqrt(ab) * (1 - cos)


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return 10 * math.log10(1.0 / mse)


def nearest_centroid_loo(x, y):
    """Leave-one-out nearest-centroid accuracy on flattened pixels."""
    x = x.reshape(len(x), -1)
    labels = sorted(set(y.tolist()))
    sums = {c: x[y == c].sum(0) for c in labels}
    counts = {c: int((y == c).sum()) for c in labels}
    hits = 0
    for i in range(len(x)):
        best, best_d = None, np.inf
        for c in labels:
            s, n = sums[c], counts[c]
            if c == y[i]:
                s, n = s - x[i], n - 1
            d = float(np.sum((x[i] - s / n) ** 2))
            if d < best_d:
                best, best_d = c, d
        hits += best == y[i]
    return hits / len(x)
