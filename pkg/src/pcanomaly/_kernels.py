"""Compiled inner loops for the hot paths.

Each kernel reproduces the numpy reference code in geometry, setdist and
model bit for bit: same operation order, same tie rules. They are used for
float32/float64 arrays when numba is importable; other dtypes (the
extended-precision gradient checks) always take the numpy path. Set
``ENABLED = False`` to force the reference code.
"""
from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

ENABLED = numba is not None


def usable(*arrays) -> bool:
    return ENABLED and all(a.dtype in (np.float32, np.float64) for a in arrays) and all(a.size for a in arrays)


if numba is not None:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _sq_dists(a, b):
        B, n, _ = a.shape
        m = b.shape[1]
        out = np.empty((B, n, m), dtype=a.dtype)
        for s in range(B):
            for i in range(n):
                x0, x1, x2 = a[s, i, 0], a[s, i, 1], a[s, i, 2]
                for j in range(m):
                    d0 = x0 - b[s, j, 0]
                    d1 = x1 - b[s, j, 1]
                    d2 = x2 - b[s, j, 2]
                    out[s, i, j] = d0 * d0 + d1 * d1 + d2 * d2
        return out

    @_jit
    def _knn(pts, k):
        B, n, _ = pts.shape
        out = np.empty((B, n, k), dtype=np.intp)
        vals = np.empty(k, dtype=pts.dtype)
        idx = np.empty(k, dtype=np.intp)
        d = np.empty(n, dtype=pts.dtype)
        xs = np.empty((3, n), dtype=pts.dtype)
        for s in range(B):
            for j in range(n):
                xs[0, j] = pts[s, j, 0]
                xs[1, j] = pts[s, j, 1]
                xs[2, j] = pts[s, j, 2]
            for i in range(n):
                x0, x1, x2 = xs[0, i], xs[1, i], xs[2, i]
                for j in range(n):
                    d0 = x0 - xs[0, j]
                    d1 = x1 - xs[1, j]
                    d2 = x2 - xs[2, j]
                    d[j] = d0 * d0 + d1 * d1 + d2 * d2
                d[i] = np.inf
                # insertion after equal values keeps ties in index order
                for j in range(k):
                    v = d[j]
                    pos = j
                    while pos > 0 and vals[pos - 1] > v:
                        vals[pos] = vals[pos - 1]
                        idx[pos] = idx[pos - 1]
                        pos -= 1
                    vals[pos] = v
                    idx[pos] = j
                worst = vals[k - 1]
                for j in range(k, n):
                    v = d[j]
                    if v < worst:
                        pos = k - 1
                        while pos > 0 and vals[pos - 1] > v:
                            vals[pos] = vals[pos - 1]
                            idx[pos] = idx[pos - 1]
                            pos -= 1
                        vals[pos] = v
                        idx[pos] = j
                        worst = vals[k - 1]
                for q in range(k):
                    out[s, i, q] = idx[q]
        return out

    @_jit
    def _chamfer_nn(S, T):
        B, n, _ = S.shape
        m = T.shape[1]
        nn_st = np.zeros((B, n), dtype=np.intp)
        nn_ts = np.zeros((B, m), dtype=np.intp)
        d_st = np.full((B, n), np.inf, dtype=S.dtype)
        d_ts = np.full((B, m), np.inf, dtype=S.dtype)
        for s in range(B):
            for i in range(n):
                x0, x1, x2 = S[s, i, 0], S[s, i, 1], S[s, i, 2]
                for j in range(m):
                    e0 = x0 - T[s, j, 0]
                    e1 = x1 - T[s, j, 1]
                    e2 = x2 - T[s, j, 2]
                    d = np.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
                    if d < d_st[s, i]:
                        d_st[s, i] = d
                        nn_st[s, i] = j
                    if d < d_ts[s, j]:
                        d_ts[s, j] = d
                        nn_ts[s, j] = i
        return nn_st, d_st, nn_ts, d_ts

    @_jit
    def _pool_choose(rows, graph_rows):
        M, k = graph_rows.shape
        C = rows.shape[1]
        flat = np.empty((M, C), dtype=np.intp)
        best = np.empty(C, dtype=rows.dtype)
        src = np.empty(C, dtype=np.intp)
        for i in range(M):
            r0 = graph_rows[i, 0]
            for c in range(C):
                best[c] = rows[r0, c]
                src[c] = r0
            for j in range(1, k):
                r = graph_rows[i, j]
                for c in range(C):
                    v = rows[r, c]
                    if v > best[c]:
                        best[c] = v
                        src[c] = r
            for c in range(C):
                flat[i, c] = src[c] * C + c
        return flat

    @_jit
    def _argmax_points(h):
        B, n, C = h.shape
        arg = np.zeros((B, C), dtype=np.intp)
        best = np.empty(C, dtype=h.dtype)
        for s in range(B):
            for c in range(C):
                best[c] = h[s, 0, c]
            for i in range(1, n):
                for c in range(C):
                    if h[s, i, c] > best[c]:
                        best[c] = h[s, i, c]
                        arg[s, c] = i
        return arg

    @_jit
    def _scatter_add(index, values, size):
        out = np.zeros(size, dtype=np.float64)
        for i in range(index.size):
            out[index[i]] += values[i]
        return out

    @_jit
    def _neighbor_cov(P, graph, kf):
        B, n, _ = P.shape
        k = graph.shape[2]
        centered = np.empty((B, n, k, 3), dtype=P.dtype)
        cov = np.empty((B, n, 3, 3), dtype=P.dtype)
        for s in range(B):
            for i in range(n):
                r = graph[s, i, 0]
                s0, s1, s2 = P[s, r, 0], P[s, r, 1], P[s, r, 2]
                for q in range(1, k):
                    r = graph[s, i, q]
                    s0 = s0 + P[s, r, 0]
                    s1 = s1 + P[s, r, 1]
                    s2 = s2 + P[s, r, 2]
                m0, m1, m2 = s0 / kf, s1 / kf, s2 / kf
                for q in range(k):
                    r = graph[s, i, q]
                    centered[s, i, q, 0] = P[s, r, 0] - m0
                    centered[s, i, q, 1] = P[s, r, 1] - m1
                    centered[s, i, q, 2] = P[s, r, 2] - m2
                for a in range(3):
                    for c in range(a, 3):
                        acc = centered[s, i, 0, a] * centered[s, i, 0, c]
                        for q in range(1, k):
                            acc = acc + centered[s, i, q, a] * centered[s, i, q, c]
                        v = acc / kf
                        cov[s, i, a, c] = v
                        cov[s, i, c, a] = v
        return centered, cov

    @_jit
    def _cov_backward(G, centered, graph, kf):
        B, n, k, _ = centered.shape
        # float64 accumulation in index order, like np.bincount
        out = np.zeros((B * n, 3), dtype=np.float64)
        S = np.empty((3, 3), dtype=G.dtype)
        for s in range(B):
            for i in range(n):
                for a in range(3):
                    for c in range(3):
                        S[a, c] = G[s, i, a, c] + G[s, i, c, a]
                for q in range(k):
                    r = s * n + graph[s, i, q]
                    c0, c1, c2 = centered[s, i, q, 0], centered[s, i, q, 1], centered[s, i, q, 2]
                    for a in range(3):
                        v = (S[a, 0] * c0 + S[a, 1] * c1 + S[a, 2] * c2) / kf
                        out[r, a] += v
        return out


def _batched(x):
    x = np.ascontiguousarray(x)
    return x.reshape((-1,) + x.shape[-2:])


def sq_dists(a, b):
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    dt = np.result_type(a, b)
    a3 = _batched(np.broadcast_to(a, lead + a.shape[-2:])).astype(dt, copy=False)
    b3 = _batched(np.broadcast_to(b, lead + b.shape[-2:])).astype(dt, copy=False)
    return _sq_dists(a3, b3).reshape(lead + (a.shape[-2], b.shape[-2]))


def knn(pts, k):
    return _knn(_batched(pts), k).reshape(pts.shape[:-1] + (k,))


def chamfer_nn(S, T):
    """Nearest-neighbor indices and distances in both directions."""
    lead = np.broadcast_shapes(S.shape[:-2], T.shape[:-2])
    dt = np.result_type(S, T)
    S3 = _batched(np.broadcast_to(S, lead + S.shape[-2:])).astype(dt, copy=False)
    T3 = _batched(np.broadcast_to(T, lead + T.shape[-2:])).astype(dt, copy=False)
    nn_st, d_st, nn_ts, d_ts = _chamfer_nn(S3, T3)
    n, m = S.shape[-2], T.shape[-2]
    return (nn_st.reshape(lead + (n,)), d_st.reshape(lead + (n,)),
            nn_ts.reshape(lead + (m,)), d_ts.reshape(lead + (m,)))


def pool_choose(rows, graph_rows):
    """Flat source index ``row * C + channel`` of each neighbor maximum."""
    return _pool_choose(np.ascontiguousarray(rows), np.ascontiguousarray(graph_rows))


def argmax_points(h):
    """``h.argmax(axis=1)`` for ``(B, n, C)`` arrays without NaNs."""
    return _argmax_points(np.ascontiguousarray(h))


def scatter_add(index, values, size):
    """``np.bincount(index, values, size)``: float64 sums in index order."""
    return _scatter_add(np.ascontiguousarray(index).ravel(), np.ascontiguousarray(values).ravel(), size)


def neighbor_cov(P, graph):
    k = graph.shape[-1]
    centered, cov = _neighbor_cov(_batched(P), np.ascontiguousarray(graph).reshape(-1, P.shape[-2], k),
                                  P.dtype.type(k))
    return centered.reshape(graph.shape + (3,)), cov.reshape(graph.shape[:-1] + (3, 3))


def cov_backward(G, centered, graph):
    """Scatter the covariance gradient ``G`` back onto point coordinates (float64)."""
    B, n, k = graph.shape
    return _cov_backward(np.ascontiguousarray(G), np.ascontiguousarray(centered), np.ascontiguousarray(graph),
                         G.dtype.type(k)).reshape(B, n, 3)
