"""Labeled point-cloud datasets: manifest loading, synthetic shapes, splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, seeding

SHAPES = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "helix")


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Fixed-size clouds with class labels and unique ids.

    ``clouds`` is ``(N, n, 3)``. ``is_anomaly`` is only meaningful for test
    splits and is all False otherwise.
    """

    clouds: np.ndarray
    labels: np.ndarray
    ids: list[str]
    is_anomaly: np.ndarray = field(default=None)

    def __post_init__(self):
        self.clouds = np.asarray(self.clouds)
        self.labels = np.asarray(self.labels, dtype=object)
        self.ids = list(self.ids)
        if self.is_anomaly is None:
            self.is_anomaly = np.zeros(len(self.ids), dtype=bool)
        self.is_anomaly = np.asarray(self.is_anomaly, dtype=bool)
        if not (self.clouds.shape[0] == len(self.labels) == len(self.ids) == len(self.is_anomaly)):
            raise DatasetError("clouds, labels, ids and flags must have equal lengths")
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("dataset ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def classes(self) -> list[str]:
        """Class names in order of first appearance."""
        return list(dict.fromkeys(self.labels.tolist()))

    @property
    def n_points(self) -> int:
        return self.clouds.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.intp)
        return LabeledDataset(
            self.clouds[index], self.labels[index], [self.ids[i] for i in index], self.is_anomaly[index]
        )


def _check_class_sizes(labels):
    names, counts = np.unique(np.asarray(labels, dtype=str), return_counts=True)
    small = [str(c) for c, k in zip(names, counts) if k < 2]
    if small:
        raise DatasetError(f"every class needs at least 2 samples; too few in {small}")


# -- synthetic shapes -------------------------------------------------------
# Each sampler returns n points distributed uniformly over the surface (or
# curve). Centrally symmetric shapes use antithetic pairs so the sample
# centroid sits exactly at the shape center.

def _antithetic(draw, rng, n):
    half = draw(rng, (n + 1) // 2)
    return np.concatenate([half, -half])[:n]


def _sphere(rng, n):
    def draw(rng, k):
        v = rng.standard_normal((k, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    return _antithetic(draw, rng, n)


def _cube(rng, n):
    def draw(rng, k):
        pts = rng.uniform(-1.0, 1.0, size=(k, 3))
        axis = rng.integers(0, 3, size=k)
        pts[np.arange(k), axis] = rng.choice([-1.0, 1.0], size=k)
        return pts
    return _antithetic(draw, rng, n)


def _cylinder(rng, n, radius=0.5, half_height=1.0):
    side = 2 * np.pi * radius * 2 * half_height
    caps = 2 * np.pi * radius**2

    def draw(rng, k):
        theta = rng.uniform(0, 2 * np.pi, size=k)
        on_side = rng.uniform(size=k) < side / (side + caps)
        r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=k)))
        z = np.where(on_side, rng.uniform(-half_height, half_height, size=k),
                     rng.choice([-half_height, half_height], size=k))
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return _antithetic(draw, rng, n)


def _cone(rng, n, radius=1.0, height=2.0):
    lateral = np.pi * radius * np.hypot(radius, height)
    base = np.pi * radius**2
    theta = rng.uniform(0, 2 * np.pi, size=n)
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    # lateral: radius fraction s has density 2s; base: uniform disk
    s = np.sqrt(rng.uniform(size=n))
    r = radius * s
    z = np.where(on_side, height * (1.0 - s), 0.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major=1.0, minor=0.35):
    def draw(rng, k):
        out = np.empty((0, 2))
        while len(out) < k:
            tube = rng.uniform(0, 2 * np.pi, size=2 * k)
            keep = rng.uniform(size=2 * k) < (major + minor * np.cos(tube)) / (major + minor)
            ring = rng.uniform(0, 2 * np.pi, size=keep.sum())
            out = np.concatenate([out, np.stack([tube[keep], ring], axis=1)])
        tube, ring = out[:k].T
        w = major + minor * np.cos(tube)
        return np.stack([w * np.cos(ring), w * np.sin(ring), minor * np.sin(tube)], axis=1)
    return _antithetic(draw, rng, n)


def _plane(rng, n):
    def draw(rng, k):
        return np.column_stack([rng.uniform(-1, 1, size=(k, 2)), np.zeros(k)])
    return _antithetic(draw, rng, n)


def _helix(rng, n, radius=0.5, turns=3.0):
    t = rng.uniform(size=n)
    angle = 2 * np.pi * turns * t
    return np.stack([radius * np.cos(angle), radius * np.sin(angle), 2 * t - 1], axis=1)


_SAMPLERS = {
    "sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "cone": _cone,
    "torus": _torus, "plane": _plane, "helix": _helix,
}


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation matrix (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synth_shape(name: str, n: int, rng, noise_sigma: float = 0.0) -> np.ndarray:
    """One randomly posed, jittered, normalized sample of a named shape."""
    if name not in _SAMPLERS:
        raise DatasetError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")
    pts = _SAMPLERS[name](rng, n)
    pts = pts @ random_rotation(rng).T * rng.uniform(0.8, 1.2)
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    return geometry.normalize(pts)


def synth_generate(classes=SHAPES, per_class: int = 100, n: int = 256,
                   noise_sigma: float = 0.02, seed: int = 0) -> LabeledDataset:
    """Deterministic synthetic dataset of parametric shape families."""
    classes = list(classes)
    for name in classes:
        if name not in _SAMPLERS:
            raise DatasetError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")
    if per_class < 2:
        raise DatasetError("per_class must be at least 2")
    clouds, labels, ids = [], [], []
    for name in classes:
        for i in range(per_class):
            rng = seeding.rng_for(seed, seeding.SYNTH, SHAPES.index(name), i)
            clouds.append(synth_shape(name, n, rng, noise_sigma))
            labels.append(name)
            ids.append(f"{name}_{i:04d}")
    return LabeledDataset(np.stack(clouds), labels, ids)


# -- files ------------------------------------------------------------------

def load_manifest(path, n: int = 2048, seed: int = 0) -> LabeledDataset:
    """Load a ``{class: [point file, ...]}`` JSON manifest.

    Paths are relative to the manifest's directory. Each cloud is randomly
    subsampled to ``n`` points and normalized; ids are the listed paths.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(spec, dict) or not all(isinstance(v, list) for v in spec.values()):
        raise DatasetError(f"{path}: manifest must map class names to lists of files")
    clouds, labels, ids = [], [], []
    seen = set()
    for label, files in spec.items():
        for rel in files:
            if rel in seen:
                raise DatasetError(f"{path}: duplicate entry {rel!r}")
            seen.add(rel)
            pts = geometry.read_xyz(path.parent / rel)
            idx = len(ids)
            try:
                pts = geometry.random_sample(pts, n, seeding.seed_for(seed, seeding.SAMPLE, idx))
            except geometry.PointCloudError as exc:
                raise DatasetError(f"{rel}: {exc}") from None
            clouds.append(geometry.normalize(pts))
            labels.append(label)
            ids.append(rel)
    if not ids:
        raise DatasetError(f"{path}: manifest lists no files")
    _check_class_sizes(labels)
    return LabeledDataset(np.stack(clouds), labels, ids)


def export_dataset(dataset: LabeledDataset, out_dir) -> Path:
    """Write ``<class>/<id>.xyz`` files plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    manifest: dict[str, list[str]] = {}
    for cloud, label, sample_id in zip(dataset.clouds, dataset.labels, dataset.ids):
        rel = f"{label}/{sample_id}.xyz"
        (out / label).mkdir(parents=True, exist_ok=True)
        geometry.write_xyz(out / rel, cloud)
        manifest.setdefault(label, []).append(rel)
    target = out / "manifest.json"
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return target


def category_out_split(dataset: LabeledDataset, anomaly_class: str, holdout_fraction: float = 0.2,
                       seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Hold one class out as anomalous.

    Train gets ``1 - holdout_fraction`` of every other class; test gets the
    remaining normals plus every sample of ``anomaly_class`` (flagged).
    """
    classes = dataset.classes
    if anomaly_class not in classes:
        raise DatasetError(f"unknown class {anomaly_class!r}; dataset has {classes}")
    if not 0 < holdout_fraction < 1:
        raise DatasetError("holdout_fraction must be in (0, 1)")
    train_idx, test_idx = [], []
    for ci, name in enumerate(classes):
        members = np.flatnonzero(dataset.labels == name)
        if name == anomaly_class:
            test_idx.extend(members)
            continue
        members = seeding.rng_for(seed, seeding.SPLIT, ci).permutation(members)
        n_test = min(len(members) - 1, max(1, int(round(holdout_fraction * len(members)))))
        test_idx.extend(members[:n_test])
        train_idx.extend(members[n_test:])
    train = dataset.subset(np.sort(train_idx))
    train.is_anomaly[:] = False
    test = dataset.subset(np.sort(test_idx))
    test.is_anomaly = test.labels == anomaly_class
    return train, test
