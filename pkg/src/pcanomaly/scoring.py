"""Anomaly scores for point clouds.

Six score variants are supported, listed in :class:`ScoreVariant` order. The
composite variants add the min-max scaled distance and KL components over a
whole test set. Chamfer distance (``CD``) is the default score.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry, seeding
from .model import ModelParams, decode_batch, encode_forward, kl_unit_gaussian
from .setdist import EMD_EXACT_MAX, chamfer_batch, emd_approx, emd_exact, pairwise_distances


class ScoreError(ValueError):
    pass


class ScoreVariant(enum.Enum):
    LATENT_L2 = "latent_l2"
    KL = "kl"
    EMD_PLUS_KL_SCALED = "emd+kl"
    EMD = "emd"
    CD_PLUS_KL_SCALED = "cd+kl"
    CD = "cd"

    @property
    def composite(self) -> bool:
        return self in (ScoreVariant.EMD_PLUS_KL_SCALED, ScoreVariant.CD_PLUS_KL_SCALED)

    @property
    def uses_emd(self) -> bool:
        return self in (ScoreVariant.EMD, ScoreVariant.EMD_PLUS_KL_SCALED)

    @classmethod
    def parse(cls, name) -> "ScoreVariant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        for v in cls:
            if key in (v.value, v.name.lower()):
                return v
        raise ScoreError(f"unknown score variant {name!r}; choose from {[v.value for v in cls]}")


DEFAULT_VARIANT = ScoreVariant.CD


def n_scale(raw) -> np.ndarray:
    """Min-max scale a score vector to [0, 1]."""
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ScoreError("n_scale needs a vector of at least two scores")
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise ScoreError("n_scale is undefined when all scores are equal")
    return (x - lo) / (hi - lo)


def _noise_pair(seed: int, d: int, sample_z: bool, dtype):
    if not sample_z:
        z = np.zeros(d, dtype=dtype)
        return z, z
    eps = seeding.rng_for(seed, seeding.SCORE_NOISE, 0).standard_normal(d).astype(dtype)
    eps_hat = seeding.rng_for(seed, seeding.SCORE_NOISE, 1).standard_normal(d).astype(dtype)
    return eps, eps_hat


def _reconstruct(params, z, grid):
    return decode_batch(params, z, grid)


def emd_score(S, T) -> float:
    """EMD between a cloud and its reconstruction.

    Exact up to the solver's size guard; above it, an auction with epsilon
    set to 1e-3 of the mean nearest-neighbor spacing of ``S``.
    """
    if len(S) <= EMD_EXACT_MAX:
        return emd_exact(S, T).value
    graph = geometry.knn_graph(S, 1)
    spacing = float(np.linalg.norm(S - S[graph[:, 0]], axis=1).mean())
    return emd_approx(S, T, epsilon=1e-3 * max(spacing, 1e-12)).value


def _raw_batch(params, clouds, variant, eps, eps_hat, k, grid):
    """Raw score components for a batch: ``(primary, kl)`` arrays."""
    mu, logvar, _ = encode_forward(params, clouds, k)
    kl = kl_unit_gaussian(mu, logvar)
    if variant is ScoreVariant.KL:
        return kl, None
    z = mu + eps * np.exp(0.5 * logvar)
    recon = _reconstruct(params, z, grid)
    if variant is ScoreVariant.LATENT_L2:
        mu_r, logvar_r, _ = encode_forward(params, recon, k)
        z_r = mu_r + eps_hat * np.exp(0.5 * logvar_r)
        return np.linalg.norm(z - z_r, axis=-1), None
    if variant.uses_emd:
        dist = np.array([emd_score(s.astype(np.float64), r.astype(np.float64)) for s, r in zip(clouds, recon)])
    else:
        dist = chamfer_batch(clouds, recon)[0]
    return dist, (kl if variant.composite else None)


def _grid_for(variant, n, m, grid):
    if grid is None:
        grid = geometry.fibonacci_sphere(n if m is None else m)
    grid = np.asarray(grid)
    if variant.uses_emd and grid.shape[0] != n:
        raise ScoreError(f"EMD scores need as many output points as input points ({grid.shape[0]} != {n})")
    return grid


def score_sample(params: ModelParams, cloud, variant=DEFAULT_VARIANT, seed: int = 0, *, k: int,
                 m: int | None = None, grid=None, sample_z: bool = True):
    """Raw anomaly score of one cloud.

    Simple variants return a float; composite variants return the pair
    ``(distance, kl)`` to be scaled across a test set. ``m`` (or an explicit
    ``grid``) sets the number of output points and defaults to the cloud
    size. With ``sample_z=False`` the codeword is the latent mean.
    """
    variant = ScoreVariant.parse(variant)
    cloud = geometry.as_cloud(cloud).astype(params.dtype)
    grid = _grid_for(variant, len(cloud), m, grid).astype(params.dtype)
    eps, eps_hat = _noise_pair(seed, params.config.latent_dim, sample_z, params.dtype)
    primary, kl = _raw_batch(params, cloud[None], variant, eps[None], eps_hat[None], k, grid)
    if variant.composite:
        return float(primary[0]), float(kl[0])
    return float(primary[0])


@dataclass
class TestsetScores:
    """Final scores plus the raw components they were built from."""

    variant: ScoreVariant
    final: np.ndarray
    primary: np.ndarray
    kl: np.ndarray | None = None


def sample_seeds(seed: int, count: int) -> list[int]:
    """Per-sample scoring seeds derived from a run seed."""
    return [seeding.seed_for(seed, seeding.SCORE_NOISE, i) for i in range(count)]


def score_testset_detailed(params: ModelParams, clouds, variant=DEFAULT_VARIANT, seed: int = 0, *, k: int,
                           m: int | None = None, sample_z: bool = True, batch_size: int = 32) -> TestsetScores:
    variant = ScoreVariant.parse(variant)
    clouds = np.asarray(getattr(clouds, "clouds", clouds)).astype(params.dtype)
    if clouds.ndim != 3 or clouds.shape[0] < 2:
        raise ScoreError("scoring a test set needs at least two clouds")
    grid = _grid_for(variant, clouds.shape[1], m, None).astype(params.dtype)
    d = params.config.latent_dim
    noise = [_noise_pair(s, d, sample_z, params.dtype) for s in sample_seeds(seed, len(clouds))]
    eps = np.stack([a for a, _ in noise])
    eps_hat = np.stack([b for _, b in noise])
    primary, kls = [], []
    for start in range(0, len(clouds), batch_size):
        sl = slice(start, start + batch_size)
        p, kl = _raw_batch(params, clouds[sl], variant, eps[sl], eps_hat[sl], k, grid)
        primary.append(p)
        if kl is not None:
            kls.append(kl)
    primary = np.concatenate(primary).astype(np.float64)
    if variant.composite:
        kl = np.concatenate(kls).astype(np.float64)
        return TestsetScores(variant, n_scale(primary) + n_scale(kl), primary, kl)
    return TestsetScores(variant, primary, primary)


def score_testset(params: ModelParams, clouds, variant=DEFAULT_VARIANT, seed: int = 0, **kwargs) -> np.ndarray:
    """Final anomaly scores for a test set.

    Sample ``i`` is scored with seed ``sample_seeds(seed, N)[i]``. Composite
    variants return ``n_scale(distance) + n_scale(kl)`` over the set.
    """
    return score_testset_detailed(params, clouds, variant, seed, **kwargs).final


SCORE_COLUMNS = ("id", "label", "is_anomaly", "variant", "raw_primary", "raw_kl", "score")


def write_scores_csv(path, dataset, scores: TestsetScores) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for i, sample_id in enumerate(dataset.ids):
            kl = "" if scores.kl is None else repr(float(scores.kl[i]))
            w.writerow([sample_id, dataset.labels[i], int(dataset.is_anomaly[i]), scores.variant.value,
                        repr(float(scores.primary[i])), kl, repr(float(scores.final[i]))])
