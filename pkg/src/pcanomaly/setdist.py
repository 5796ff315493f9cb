"""Permutation-invariant distances between point sets.

Chamfer distance uses plain (unsquared) Euclidean norms, averaged in each
direction. EMD is the minimum summed Euclidean cost over bijections; it is
solved exactly for small sets and by an epsilon-scaled auction otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels
from .geometry import pairwise_sq_dist

# largest set size accepted by the cubic exact solver
EMD_EXACT_MAX = 1024


class SetDistanceError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceReport:
    """A distance value and the point pairing that realizes it.

    For EMD ``matching`` is the optimal bijection as an index array into the
    second cloud. For Chamfer it is the pair ``(nn_st, nn_ts)`` of
    nearest-neighbor indices in both directions.
    """

    value: float
    matching: object = None


def pairwise_distances(a, b) -> np.ndarray:
    """Euclidean distance matrix between point sets, batched over leading axes."""
    return np.sqrt(pairwise_sq_dist(np.asarray(a), np.asarray(b)))


def _check_nonempty(*clouds):
    for c in clouds:
        if c.ndim < 2 or c.shape[-2] == 0 or c.shape[-1] != 3:
            raise SetDistanceError(f"expected a nonempty (n, 3) cloud, got shape {c.shape}")


def chamfer_batch(S, T):
    """Batched Chamfer distance.

    Returns ``(values, nn_st, nn_ts)`` where ``nn_st[..., i]`` is the index in
    ``T`` closest to ``S[..., i]`` and ``nn_ts`` the converse. Ties go to the
    lower index.
    """
    S = np.asarray(S)
    T = np.asarray(T)
    _check_nonempty(S, T)
    if _kernels.usable(S, T):
        nn_st, d_st, nn_ts, d_ts = _kernels.chamfer_nn(S, T)
        return d_st.mean(axis=-1) + d_ts.mean(axis=-1), nn_st, nn_ts
    D = pairwise_distances(S, T)
    nn_st = D.argmin(axis=-1)
    nn_ts = D.argmin(axis=-2)
    d_st = np.take_along_axis(D, nn_st[..., :, None], axis=-1)[..., 0]
    d_ts = np.take_along_axis(D, nn_ts[..., None, :], axis=-2)[..., 0, :]
    values = d_st.mean(axis=-1) + d_ts.mean(axis=-1)
    return values, nn_st, nn_ts


def chamfer_grad_batch(S, T, nn_st, nn_ts) -> np.ndarray:
    """Gradient of the Chamfer value with respect to ``T`` for fixed matchings."""
    S = np.asarray(S)
    T = np.asarray(T)
    n, m = S.shape[-2], T.shape[-2]
    grad = np.zeros_like(T)

    # S -> T term: each S point pulls on its nearest T point
    matched = np.take_along_axis(T, nn_st[..., None], axis=-2)
    diff = matched - S
    contrib = _unit(diff) / n
    if T.ndim == 2:
        np.add.at(grad, nn_st, contrib)
    else:
        B = T.shape[0]
        flat = (np.arange(B)[:, None] * m + nn_st).ravel()
        g = np.zeros((B * m, 3), dtype=T.dtype)
        np.add.at(g, flat, contrib.reshape(-1, 3))
        grad += g.reshape(T.shape)

    # T -> S term: each T point moves toward its nearest S point
    matched = np.take_along_axis(S, nn_ts[..., None], axis=-2)
    grad += _unit(T - matched) / m
    return grad


def _unit(v):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    # zero subgradient at coincident points
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, v / safe, 0.0)


def chamfer(S, T) -> DistanceReport:
    """Chamfer distance between two clouds (unsquared norms, mean per direction)."""
    value, nn_st, nn_ts = chamfer_batch(S, T)
    return DistanceReport(float(value), (nn_st, nn_ts))


def chamfer_grad(S, T) -> np.ndarray:
    """Gradient of ``chamfer(S, T)`` with respect to the points of ``T``."""
    _, nn_st, nn_ts = chamfer_batch(S, T)
    return chamfer_grad_batch(S, T, nn_st, nn_ts)


def _check_same_size(S, T):
    if S.shape[0] != T.shape[0]:
        raise SetDistanceError(f"EMD needs equal sizes, got {S.shape[0]} and {T.shape[0]}")


def emd_exact(S, T) -> DistanceReport:
    """Exact EMD via a linear assignment solve."""
    S = np.asarray(S, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    _check_nonempty(S, T)
    _check_same_size(S, T)
    if S.shape[0] > EMD_EXACT_MAX:
        raise SetDistanceError(
            f"emd_exact is limited to {EMD_EXACT_MAX} points (got {S.shape[0]}); use emd_approx"
        )
    cost = pairwise_distances(S, T)
    rows, cols = linear_sum_assignment(cost)
    return DistanceReport(float(cost[rows, cols].sum()), cols)


def emd_approx(S, T, epsilon: float) -> DistanceReport:
    """Approximate EMD by an auction with epsilon scaling.

    The returned pairing is a true bijection, so the value is never below the
    optimum, and it exceeds the optimum by at most ``n * epsilon``.
    """
    S = np.asarray(S, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    _check_nonempty(S, T)
    _check_same_size(S, T)
    if not epsilon > 0:
        raise SetDistanceError("epsilon must be positive")
    cost = pairwise_distances(S, T)
    assignment = auction_assignment(-cost, epsilon)
    return DistanceReport(float(cost[np.arange(len(assignment)), assignment].sum()), assignment)


def auction_assignment(benefit, epsilon: float, scale_factor: float = 5.0) -> np.ndarray:
    """Maximum-benefit assignment of rows to columns by a Jacobi auction.

    Every unassigned row bids at once on its best column; each column goes to
    its highest bidder. Epsilon starts at a quarter of the benefit range and
    is divided by ``scale_factor`` each phase, with prices carried over.
    Returns ``col_of_row``.
    """
    benefit = np.asarray(benefit, dtype=np.float64)
    n = benefit.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.intp)
    prices = np.zeros(n)
    eps = max(float(np.ptp(benefit)) / 4.0, epsilon)
    while True:
        col_of_row = np.full(n, -1, dtype=np.intp)
        row_of_col = np.full(n, -1, dtype=np.intp)
        free = np.arange(n)
        while free.size:
            values = benefit[free] - prices
            best = values.argmax(axis=1)
            idx = np.arange(free.size)
            v1 = values[idx, best]
            values[idx, best] = -np.inf
            v2 = values.max(axis=1)
            bids = prices[best] + (v1 - v2) + eps

            # highest bid per column wins; lexsort orders by column then bid
            order = np.lexsort((bids, best))
            cols = best[order]
            last = np.ones(cols.size, dtype=bool)
            last[:-1] = cols[1:] != cols[:-1]
            win_cols = cols[last]
            win_rows = free[order[last]]
            win_bids = bids[order[last]]

            evicted = row_of_col[win_cols]
            col_of_row[evicted[evicted >= 0]] = -1
            row_of_col[win_cols] = win_rows
            col_of_row[win_rows] = win_cols
            prices[win_cols] = win_bids
            free = np.flatnonzero(col_of_row < 0)
        if eps <= epsilon:
            return col_of_row
        eps = max(eps / scale_factor, epsilon)
