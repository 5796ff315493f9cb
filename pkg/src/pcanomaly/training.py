"""Training objective and Adam training loop.

The objective per cloud is ``Lrec + KL_ori + KL_rec`` with unit weights:
Chamfer distance between input and reconstruction, KL of the input's latent
Gaussian to N(0, I), and KL of the reconstruction's latent Gaussian to
N(0, I). ``kl_rec_enabled=False`` drops the last term.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry, seeding
from .model import (
    DESK_CONFIG,
    LossSpec,
    ModelConfig,
    ModelParams,
    NoiseDraw,
    init_params,
    kl_unit_gaussian,
    loss_backward,
    loss_forward,
)

__all__ = [
    "LossBreakdown", "TrainConfig", "DESK_TRAINING", "EpochLog", "FitResult", "TrainingDiverged",
    "kl_unit_gaussian", "compute_loss", "fit", "write_loss_csv", "read_loss_csv",
]

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "lrec", "kl_ori", "kl_rec", "total")


class TrainingDiverged(FloatingPointError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class LossBreakdown:
    lrec: float
    kl_ori: float
    kl_rec: float

    @property
    def total(self) -> float:
        return self.lrec + self.kl_ori + self.kl_rec


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    k: int = 16
    m: int = 2048
    kl_rec_enabled: bool = True
    kl_reduction: str = "sum"
    kl_scale: float = 1.0
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        self.loss_spec  # validates the KL settings
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.k < 1 or self.m < 1:
            raise ValueError(f"invalid training configuration: {self}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam moment coefficients must lie in [0, 1) and eps must be positive")

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(kl_rec=self.kl_rec_enabled, kl_reduction=self.kl_reduction, kl_scale=self.kl_scale)

    def grid(self) -> np.ndarray:
        return geometry.fibonacci_sphere(self.m)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


# Laptop-scale recipe for 256-point synthetic clouds. With unit KL weights the
# posterior collapses at this scale and the decoder learns one template shape.
DESK_TRAINING = TrainConfig(lr=1e-3, k=8, m=256, kl_scale=1e-4, model=DESK_CONFIG)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lrec: float
    kl_ori: float
    kl_rec: float
    total: float


@dataclass
class FitResult:
    params: ModelParams
    history: list[EpochLog]


def compute_loss(params: ModelParams, cloud, noise, noise_rec, grid, config: TrainConfig) -> LossBreakdown:
    """Loss terms for one cloud.

    ``noise`` drives the reparameterization of the input's latent.
    ``noise_rec`` is accepted for symmetry with the scoring code and is not
    used: the KL of the reconstruction needs no sample.
    """
    eps = noise.epsilon if isinstance(noise, NoiseDraw) else np.asarray(noise)
    cloud = geometry.as_cloud(cloud)
    terms, _ = loss_forward(params, cloud[None], eps[None], grid, config.k, kl_rec=config.kl_rec_enabled,
                            kl_weight=config.loss_spec.kl_weight(params.config.latent_dim))
    return LossBreakdown(float(terms.lrec[0]), float(terms.kl_ori[0]), float(terms.kl_rec[0]))


def _clouds_of(dataset) -> np.ndarray:
    clouds = getattr(dataset, "clouds", dataset)
    return np.asarray(clouds)


def fit(dataset, config: TrainConfig, params: ModelParams | None = None, progress=None) -> FitResult:
    """Train on normal clouds with Adam.

    ``dataset`` is a :class:`~pcanomaly.data.LabeledDataset` or an
    ``(N, n, 3)`` array. Shuffling and noise come from ``config.seed``, so
    the run is deterministic. ``progress(epoch_log, params)`` is called
    after every epoch if given; it must not modify ``params``.
    """
    clouds = _clouds_of(dataset)
    if clouds.ndim != 3 or clouds.shape[0] == 0:
        raise ValueError("training needs a nonempty (N, n, 3) array of clouds")
    if clouds.shape[1] <= config.k:
        raise ValueError(f"clouds need more than k={config.k} points")
    dtype = np.dtype(config.dtype)
    if params is None:
        params = init_params(config.model, seeding.seed_for(config.seed, seeding.INIT), dtype=dtype)
    else:
        params = params.astype(dtype)
    clouds = clouds.astype(dtype)
    grid = config.grid().astype(dtype)
    N, d = clouds.shape[0], config.model.latent_dim
    spec = config.loss_spec
    kl_weight = spec.kl_weight(d)
    # the training clouds never change, so their k-NN graphs are built once
    graphs = np.concatenate([geometry.knn_graph(clouds[i:i + 64], config.k) for i in range(0, N, 64)])

    m1 = np.zeros_like(params.flat)
    m2 = np.zeros_like(params.flat)
    step = 0
    history = []
    for epoch in range(config.epochs):
        order = seeding.rng_for(config.seed, seeding.SHUFFLE, epoch).permutation(N)
        noise = seeding.rng_for(config.seed, seeding.TRAIN_NOISE, epoch).standard_normal((N, d)).astype(dtype)
        sums = np.zeros(3)
        for start in range(0, N, config.batch_size):
            batch = order[start:start + config.batch_size]
            terms, state = loss_forward(params, clouds[batch], noise[batch], grid, config.k,
                                        kl_rec=config.kl_rec_enabled, kl_weight=kl_weight,
                                        graph=graphs[batch])
            total = terms.total
            if not np.all(np.isfinite(total)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, samples {batch[~np.isfinite(total)].tolist()}"
                )
            sums += [terms.lrec.sum(), terms.kl_ori.sum(), terms.kl_rec.sum()]
            grads = loss_backward(params, state, spec, np.full(len(batch), 1.0 / len(batch))).flat
            if not np.all(np.isfinite(grads)):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}")

            step += 1
            m1 *= config.beta1
            m1 += (1 - config.beta1) * grads
            m2 *= config.beta2
            m2 += (1 - config.beta2) * grads * grads
            lr_t = config.lr * np.sqrt(1 - config.beta2**step) / (1 - config.beta1**step)
            params.flat -= (lr_t * m1 / (np.sqrt(m2) + config.adam_eps)).astype(dtype)

        lrec, kl_ori, kl_rec = (float(x) for x in sums / N)
        entry = EpochLog(epoch, lrec, kl_ori, kl_rec, lrec + kl_ori + kl_rec)
        history.append(entry)
        log.debug("epoch %d: %s", epoch, entry)
        if progress is not None:
            progress(entry, params)
    return FitResult(params, history)


def write_loss_csv(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for e in history:
            w.writerow([e.epoch, repr(e.lrec), repr(e.kl_ori), repr(e.kl_rec), repr(e.total)])


def read_loss_csv(path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        return [
            EpochLog(int(r["epoch"]), float(r["lrec"]), float(r["kl_ori"]), float(r["kl_rec"]), float(r["total"]))
            for r in csv.DictReader(fh)
        ]
