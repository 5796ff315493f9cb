"""Slow, obviously-correct reference implementations used by the tests.

Nothing here imports the package's distance or ranking code, so agreement
with it is independent evidence.
"""
import itertools
import math

import numpy as np


def chamfer_loops(S, T):
    """Chamfer distance by explicit double loops over points."""
    total_s = 0.0
    for x in S:
        total_s += min(math.dist(x, t) for t in T)
    total_t = 0.0
    for t in T:
        total_t += min(math.dist(t, x) for x in S)
    return total_s / len(S) + total_t / len(T)


def emd_permutations(S, T):
    """Minimum summed distance over all n! bijections."""
    n = len(S)
    D = [[math.dist(S[i], T[j]) for j in range(n)] for i in range(n)]
    return min(sum(D[i][p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def mann_whitney(scores, labels):
    """P(anomaly > normal) + P(tie) / 2 by counting every pair."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def knn_brute(points, k):
    """Row i: the k closest other points, sorted by (distance, index)."""
    n = len(points)
    rows = []
    for i in range(n):
        others = [(sum((points[i][c] - points[j][c]) ** 2 for c in range(3)), j) for j in range(n) if j != i]
        rows.append([j for _, j in sorted(others)[:k]])
    return np.array(rows)


def central_difference(f, x, h):
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return out.reshape(x.shape)


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
