"""Independent reference implementations used as test oracles.

Nothing here imports the package's autodiff; every value is computed with
plain numpy loops or closed forms.
"""
import math

import numpy as np


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f over every entry of array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f(x)
        flat[i] = old - eps
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def l2(u, v):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(u, v)))


def dist(kind, u, v):
    u, v = list(map(float, u)), list(map(float, v))
    if kind == "l2":
        return l2(u, v)
    if kind == "mse":
        return sum((a - b) ** 2 for a, b in zip(u, v)) / len(u)
    if kind == "smooth_l1":
        out = 0.0
        for a, b in zip(u, v):
            t = abs(a - b)
            out += 0.5 * t * t if t < 1 else t - 0.5
        return out
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu <= 1e-12 or nv <= 1e-12:
        return 1.0
    return 1.0 - sum(a * b for a, b in zip(u, v)) / (nu * nv)


def triplet(kind, A, P, N, m):
    return sum(max(0.0, dist(kind, a, p) - dist(kind, a, n) + m) for a, p, n in zip(A, P, N))


def brute_knn(X, ids, q, k):
    """Sorted (distance^2, id, row) scan."""
    rows = [(float(np.dot(x - q, x - q)), int(i), r) for r, (x, i) in enumerate(zip(X, ids))]
    rows.sort()
    return [r for _, _, r in rows[:k]]


def recall_from_ranks(ranks, k):
    return sum(r is not None and r <= k for r in ranks) / len(ranks)
