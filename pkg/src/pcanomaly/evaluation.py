"""ROC/AUC, the category-out experiment, seed sweeps and ablation tables."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .data import LabeledDataset, category_out_split
from .model import ModelParams
from .scoring import DEFAULT_VARIANT, ScoreVariant, score_testset
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

TABLE3_POINTS = (1024, 2048, 3072, 4096, 5120)
HOLDOUT_FRACTION = 0.2


class EvaluationError(ValueError):
    pass


def _labeled(scores, is_anomaly):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_anomaly, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise EvaluationError("scores and labels must be 1-D and of equal length")
    if y.all() or not y.any():
        raise EvaluationError("AUC needs at least one anomalous and one normal sample")
    return s, y


def roc_curve(scores, is_anomaly):
    """ROC points swept over every distinct score threshold, highest first.

    Returns ``(fpr, tpr, thresholds)``; the curve starts at (0, 0) with an
    infinite threshold and ends at (1, 1). Tied scores form one step, so
    the curve cuts diagonally through them.
    """
    s, y = _labeled(scores, is_anomaly)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    thresholds = np.r_[np.inf, s[last_of_group]]
    return fp / fp[-1], tp / tp[-1], thresholds


def _roc_counts(scores, is_anomaly):
    s, y = _labeled(scores, is_anomaly)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.r_[0, np.cumsum(y)[last_of_group]]
    fp = np.r_[0, np.cumsum(~y)[last_of_group]]
    return tp, fp


def auc(scores, is_anomaly) -> float:
    """Trapezoidal area under the ROC curve.

    Computed on integer counts, so it equals the Mann-Whitney statistic
    ``P(anomaly > normal) + P(tie) / 2``. A constant scorer gets 0.5.
    """
    tp, fp = _roc_counts(scores, is_anomaly)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * int(tp[-1]) * int(fp[-1]))


def tpr_at(fpr, tpr, grid) -> np.ndarray:
    """Interpolate a ROC curve at the given false-positive rates.

    On vertical segments the highest TPR is used.
    """
    fpr = np.asarray(fpr)
    tpr = np.asarray(tpr)
    grid = np.asarray(grid, dtype=np.float64)
    i = np.clip(np.searchsorted(fpr, grid, side="right") - 1, 0, len(fpr) - 1)
    j = np.minimum(i + 1, len(fpr) - 1)
    x0, x1, y0, y1 = fpr[i], fpr[j], tpr[i], tpr[j]
    span = np.where(x1 > x0, x1 - x0, 1.0)
    return np.where(x1 > x0, y0 + (grid - x0) * (y1 - y0) / span, y0)


@dataclass
class ExperimentResult:
    anomaly_class: str
    variant: ScoreVariant
    m: int
    seed: int
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    params: ModelParams | None = field(default=None, repr=False)
    history: list | None = field(default=None, repr=False)


def evaluate_scores(scores, test: LabeledDataset, anomaly_class, variant, m, seed) -> ExperimentResult:
    fpr, tpr, _ = roc_curve(scores, test.is_anomaly)
    return ExperimentResult(anomaly_class, ScoreVariant.parse(variant), m, seed,
                            auc(scores, test.is_anomaly), fpr, tpr)


def _split(dataset, anomaly_class, config, holdout_fraction):
    if len(dataset.classes) < 2:
        raise EvaluationError("category-out needs at least two classes")
    return category_out_split(dataset, anomaly_class, holdout_fraction, config.seed)


def category_out(dataset: LabeledDataset, anomaly_class: str, config: TrainConfig, variant=DEFAULT_VARIANT, *,
                 params: ModelParams | None = None, score_seed: int = 0, sample_z: bool = True,
                 holdout_fraction: float = HOLDOUT_FRACTION, m: int | None = None) -> ExperimentResult:
    """Train without ``anomaly_class`` and measure how well the score finds it.

    Pass ``params`` to skip training. ``m`` overrides the number of decoded
    points at test time (defaults to ``config.m``; EMD variants always use
    the input size).
    """
    variant = ScoreVariant.parse(variant)
    train, test = _split(dataset, anomaly_class, config, holdout_fraction)
    history = None
    if params is None:
        result = fit(train, config)
        params, history = result.params, result.history
    m_eval = test.n_points if variant.uses_emd else (m or config.m)
    scores = score_testset(params, test, variant, score_seed, k=config.k, m=m_eval, sample_z=sample_z)
    res = evaluate_scores(scores, test, anomaly_class, variant, m_eval, score_seed)
    res.params, res.history = params, history
    return res


@dataclass
class SweepResult:
    anomaly_class: str
    variant: ScoreVariant
    seeds: list[int]
    aucs: np.ndarray
    fpr_grid: np.ndarray
    tpr_mean: np.ndarray
    tpr_var: np.ndarray

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.aucs))


def sweep_seeds(run_seed: int, n_seeds: int) -> list[int]:
    return [seeding.seed_for(run_seed, seeding.SWEEP, i) for i in range(n_seeds)]


def seed_sweep(dataset: LabeledDataset, anomaly_class: str, config: TrainConfig, variant=DEFAULT_VARIANT,
               n_seeds: int = 50, *, params: ModelParams | None = None, sample_z: bool = True,
               holdout_fraction: float = HOLDOUT_FRACTION, m: int | None = None,
               fpr_grid=None, retrain: bool = False) -> SweepResult:
    """Repeat scoring under different noise seeds.

    By default the trained model is fixed and only the scoring noise
    changes. With ``retrain=True`` every seed also trains its own model
    (``config.seed`` replaced by the sweep seed). The mean ROC and its
    pointwise variance are taken at fixed FPR grid points (101 evenly
    spaced by default).
    """
    if n_seeds < 2:
        raise EvaluationError("a seed sweep needs at least two seeds")
    variant = ScoreVariant.parse(variant)
    train, test = _split(dataset, anomaly_class, config, holdout_fraction)
    if params is None and not retrain:
        params = fit(train, config).params
    grid = np.linspace(0.0, 1.0, 101) if fpr_grid is None else np.asarray(fpr_grid, dtype=np.float64)
    m_eval = test.n_points if variant.uses_emd else (m or config.m)
    seeds = sweep_seeds(config.seed, n_seeds)
    aucs, curves = [], []
    for s in seeds:
        run_params = fit(train, config.replace(seed=s)).params if retrain else params
        scores = score_testset(run_params, test, variant, s, k=config.k, m=m_eval, sample_z=sample_z)
        fpr, tpr, _ = roc_curve(scores, test.is_anomaly)
        aucs.append(auc(scores, test.is_anomaly))
        curves.append(tpr_at(fpr, tpr, grid))
    curves = np.array(curves)
    return SweepResult(anomaly_class, variant, seeds, np.array(aucs), grid, curves.mean(axis=0), curves.var(axis=0))


# -- ablation tables ----------------------------------------------------------

class CheckpointCache:
    """Trained parameters keyed by (anomaly class, m, KL_rec on/off).

    With a directory, checkpoints are also written to and read from disk.
    """

    def __init__(self, directory=None):
        self.directory = None if directory is None else Path(directory)
        self._mem: dict = {}

    def _path(self, key):
        cls, m, kl_rec = key
        return self.directory / f"{cls}_m{m}_{'klrec' if kl_rec else 'noklrec'}.ckpt"

    def get(self, key, train_fn) -> ModelParams:
        from .model import load_checkpoint, save_checkpoint

        if key in self._mem:
            return self._mem[key]
        if self.directory is not None and self._path(key).is_file():
            params, _ = load_checkpoint(self._path(key))
        else:
            params = train_fn()
            if self.directory is not None:
                self.directory.mkdir(parents=True, exist_ok=True)
                save_checkpoint(self._path(key), params)
        self._mem[key] = params
        return params


def ablation_tables(dataset: LabeledDataset, config: TrainConfig, *, classes=None, tables=(1, 2, 3),
                    points=TABLE3_POINTS, score_seed: int = 0, cache: CheckpointCache | None = None,
                    holdout_fraction: float = HOLDOUT_FRACTION) -> dict[str, list[dict]]:
    """Per-class AUC tables shaped like the three ablations.

    ``table1``: CD score with and without the KL_rec term. ``table2``: every
    score variant, trained and decoded with ``m`` equal to the input size.
    ``table3``: CD score for each number of output points in ``points``.
    Each table is a list of row dicts ending with an ``average`` entry.
    """
    classes = list(dataset.classes if classes is None else classes)
    cache = cache or CheckpointCache()
    n = dataset.n_points
    out = {}

    def trained(cls, m, kl_rec):
        cfg = config.replace(m=m, kl_rec_enabled=kl_rec)
        train, _ = _split(dataset, cls, cfg, holdout_fraction)
        return cache.get((cls, m, kl_rec), lambda: fit(train, cfg).params), cfg

    def run(cls, variant, m, kl_rec):
        params, cfg = trained(cls, m, kl_rec)
        return category_out(dataset, cls, cfg, variant, params=params, score_seed=score_seed,
                            holdout_fraction=holdout_fraction).auc

    if 1 in tables:
        rows = [{"class": c, "without_kl_rec": run(c, ScoreVariant.CD, config.m, False),
                 "with_kl_rec": run(c, ScoreVariant.CD, config.m, True)} for c in classes]
        out["table1"] = rows + [_average_row(rows, "class")]
    if 2 in tables:
        rows = []
        for v in ScoreVariant:
            row = {"variant": v.value}
            row.update({c: run(c, v, n, config.kl_rec_enabled) for c in classes})
            row["average"] = float(np.mean([row[c] for c in classes]))
            rows.append(row)
        out["table2"] = rows
    if 3 in tables:
        rows = [{"class": c, **{str(m): run(c, ScoreVariant.CD, m, config.kl_rec_enabled) for m in points}}
                for c in classes]
        out["table3"] = rows + [_average_row(rows, "class")]
    return out


def _average_row(rows, key):
    avg = {key: "average"}
    for col in rows[0]:
        if col != key:
            avg[col] = float(np.mean([r[col] for r in rows]))
    return avg


# -- output files -------------------------------------------------------------

def write_table_csv(path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


RESULT_COLUMNS = ("anomaly_class", "variant", "m", "seed", "auc")


def write_results_csv(path, results: list[ExperimentResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([r.anomaly_class, r.variant.value, r.m, r.seed, repr(float(r.auc))])


def write_roc_csv(path, results: list[ExperimentResult]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("anomaly_class", "variant", "m", "seed", "fpr", "tpr"))
        for r in results:
            for f, t in zip(r.fpr, r.tpr):
                w.writerow([r.anomaly_class, r.variant.value, r.m, r.seed, repr(float(f)), repr(float(t))])


def write_sweep_csv(path, sweep: SweepResult) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("anomaly_class", "variant", "seed", "auc"))
        for s, a in zip(sweep.seeds, sweep.aucs):
            w.writerow([sweep.anomaly_class, sweep.variant.value, s, repr(float(a))])


def write_sweep_roc_csv(path, sweep: SweepResult) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr_mean", "tpr_var"))
        for f, mu, var in zip(sweep.fpr_grid, sweep.tpr_mean, sweep.tpr_var):
            w.writerow([repr(float(f)), repr(float(mu)), repr(float(var))])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, **entries) -> None:
    """JSON run manifest with sorted keys (config, seeds, hashes, ...)."""
    Path(path).write_text(json.dumps(entries, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, ScoreVariant):
        return obj.value
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
