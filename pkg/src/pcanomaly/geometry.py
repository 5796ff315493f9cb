"""Point-cloud containers and low-level geometry.

A point cloud is an ``(n, 3)`` float array; batched clouds are ``(B, n, 3)``.
Neighbor graphs are integer arrays of shape ``(..., n, k)`` and sphere grids
are ``(m, 3)`` arrays of unit vectors.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import _kernels

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0

# rows of the pairwise-distance matrix built at once by knn_graph
_ROW_CHUNK = 512


class PointCloudError(ValueError):
    """Raised for malformed point clouds or point-cloud files."""


def as_cloud(points, dtype=np.float64) -> np.ndarray:
    """Validate ``points`` and return it as an ``(n, 3)`` array."""
    arr = np.asarray(points, dtype=dtype)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise PointCloudError(f"expected an (n, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise PointCloudError("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise PointCloudError("point cloud has non-finite coordinates")
    return arr


def normalize(cloud) -> np.ndarray:
    """Center a cloud at the origin and scale its largest point norm to one.

    A cloud whose points all coincide maps to all zeros.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    centered = pts - pts.mean(axis=-2, keepdims=True)
    # coincident points can leave a rounding residual after centering
    flat = np.all(np.ptp(pts, axis=-2) == 0, axis=-1, keepdims=True)
    centered = np.where(flat[..., None], 0.0, centered)
    radius = np.linalg.norm(centered, axis=-1).max(axis=-1, keepdims=True)
    radius = np.where(radius > 0, radius, 1.0)
    return centered / radius[..., None]


def random_sample(cloud, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points from ``cloud`` without replacement."""
    pts = np.asarray(cloud)
    if n > pts.shape[0]:
        raise PointCloudError(f"cannot sample {n} points from a cloud of {pts.shape[0]}")
    rng = np.random.default_rng(seed)
    return pts[rng.choice(pts.shape[0], size=n, replace=False)]


def sq_norm(v) -> np.ndarray:
    """Squared norm over the last axis of length 3, summed as (x² + y²) + z²."""
    return v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2]


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Squared distances between the rows of ``a`` and ``b``, batched.

    Uses the same arithmetic as :func:`sq_norm` applied to ``a_i - b_j``.
    """
    if a.ndim >= 2 and b.ndim >= 2 and _kernels.usable(a, b):
        return _kernels.sq_dists(a, b)
    out = None
    for c in range(3):
        diff = a[..., :, None, c] - b[..., None, :, c]
        diff *= diff
        out = diff if out is None else out + diff
    return out


def knn_graph(cloud, k: int) -> np.ndarray:
    """k nearest neighbors of every point, excluding the point itself.

    Accepts ``(n, 3)`` or batched ``(..., n, 3)`` input and returns integer
    indices of shape ``(..., n, k)`` sorted by distance. Equidistant
    neighbors are ordered by lower index.
    """
    pts = np.asarray(cloud)
    if not np.issubdtype(pts.dtype, np.floating):
        pts = pts.astype(np.float64)
    n = pts.shape[-2]
    if k < 1 or n <= k:
        raise PointCloudError(f"knn_graph needs more than k={k} points, got {n}")
    if _kernels.usable(pts):
        return _kernels.knn(pts, k)
    out = np.empty(pts.shape[:-1] + (k,), dtype=np.intp)
    for start in range(0, n, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, n)
        d2 = pairwise_sq_dist(pts[..., start:stop, :], pts)
        rows = np.arange(start, stop)
        d2[..., rows - start, rows] = np.inf
        out[..., start:stop, :] = _k_smallest(d2, k)
    return out


def _k_smallest(d2, k):
    """Indices of the k smallest entries per row, ordered by (value, index)."""
    n = d2.shape[-1]
    if k + 1 >= n:
        return np.argsort(d2, axis=-1, kind="stable")[..., :k]
    # a value sort is much cheaper than argpartition; the k-th value then
    # marks exactly k entries per row unless a tie straddles the cutoff
    ranked = np.sort(d2, axis=-1)
    cutoff = ranked[..., k - 1:k]
    if np.any(ranked[..., k] == cutoff[..., 0]):
        return np.argsort(d2, axis=-1, kind="stable")[..., :k]
    cand = np.nonzero((d2 <= cutoff).reshape(-1, n))[1].reshape(d2.shape[:-1] + (k,))
    order = np.argsort(np.take_along_axis(d2, cand, axis=-1), axis=-1, kind="stable")
    return np.take_along_axis(cand, order, axis=-1)


def gather_neighbors(cloud, graph) -> np.ndarray:
    """Neighbor coordinates of shape ``(..., n, k, 3)``."""
    pts = np.asarray(cloud)
    graph = np.asarray(graph)
    if pts.ndim == 2:
        return pts[graph]
    batch = np.arange(pts.shape[0]).reshape((-1,) + (1,) * (graph.ndim - 1))
    return pts[batch, graph]


def neighbor_covariance(cloud, graph):
    """Centered neighbor coordinates and their covariance matrices.

    Returns ``(centered, cov)`` of shapes ``(..., n, k, 3)`` and
    ``(..., n, 3, 3)``. The covariance uses the neighbor mean and divisor k;
    sums run over neighbors in graph order.
    """
    pts = np.asarray(cloud)
    graph = np.asarray(graph)
    if _kernels.usable(pts) and graph.shape[:-1] == pts.shape[:-1] and graph.shape[-1] > 0:
        return _kernels.neighbor_cov(pts, graph)
    nbrs = gather_neighbors(pts, graph)
    k = nbrs.shape[-2]
    total = nbrs[..., 0, :]
    for q in range(1, k):
        total = total + nbrs[..., q, :]
    centered = nbrs - (total / k)[..., None, :]
    cov = np.empty(centered.shape[:-2] + (3, 3), dtype=centered.dtype)
    for i in range(3):
        for j in range(i, 3):
            acc = centered[..., 0, i] * centered[..., 0, j]
            for q in range(1, k):
                acc = acc + centered[..., q, i] * centered[..., q, j]
            cov[..., i, j] = cov[..., j, i] = acc / k
    return centered, cov


def local_covariance(cloud, graph) -> np.ndarray:
    """Per-point covariance of the neighbor coordinates, flattened to 9 values.

    The covariance uses the neighbor mean and divisor k. Output shape is
    ``(..., n, 9)`` in row-major order.
    """
    _, cov = neighbor_covariance(cloud, graph)
    return cov.reshape(cov.shape[:-2] + (9,))


def fibonacci_sphere(m: int) -> np.ndarray:
    """``m`` points on the unit sphere laid out on a Fibonacci lattice."""
    if m < 1:
        raise PointCloudError("sphere grid needs at least one point")
    i = np.arange(m, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / m
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = 2.0 * np.pi * i / GOLDEN_RATIO
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def read_xyz(path) -> np.ndarray:
    """Read an ASCII point file: one ``x y z`` triple per line, ``#`` comments."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"point file not found: {path}")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            fields = text.split()
            if len(fields) != 3:
                raise PointCloudError(f"{path}:{lineno}: expected 3 coordinates, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise PointCloudError(f"{path}:{lineno}: {exc}") from None
    return as_cloud(rows)


def write_xyz(path, cloud, comment: str | None = None) -> None:
    """Write a cloud in the ASCII format read by :func:`read_xyz`.

    Coordinates use Python's shortest round-trip repr, so float64 values
    survive a write/read cycle exactly.
    """
    pts = as_cloud(cloud)
    with Path(path).open("w") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")
