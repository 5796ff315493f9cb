"""Unsupervised anomaly detection for 3D point clouds with a folding VAE.

Modules:

- :mod:`pcanomaly.geometry`: clouds, normalization, k-NN graphs, local covariance, sphere grids
- :mod:`pcanomaly.setdist`: Chamfer distance and Earth Mover's Distance
- :mod:`pcanomaly.model`: encoder/decoder with hand-written backpropagation
- :mod:`pcanomaly.training`: the training objective and Adam loop
- :mod:`pcanomaly.scoring`: the six anomaly-score variants
- :mod:`pcanomaly.evaluation`: ROC/AUC, category-out runs, seed sweeps, ablations
- :mod:`pcanomaly.data`: manifests, synthetic shapes, category-out splits
- :mod:`pcanomaly.cli`: the ``pcanomaly`` command
"""

__version__ = "0.1.0"

from .data import LabeledDataset, category_out_split, load_manifest, synth_generate
from .evaluation import ablation_tables, auc, category_out, roc_curve, seed_sweep
from .geometry import fibonacci_sphere, knn_graph, local_covariance, normalize, random_sample
from .model import (
    DESK_CONFIG,
    TINY_CONFIG,
    LatentGaussian,
    LossSpec,
    ModelConfig,
    ModelParams,
    NoiseDraw,
    decode,
    encode,
    init_params,
    load_checkpoint,
    param_gradients,
    reparameterize,
    save_checkpoint,
)
from .scoring import ScoreVariant, n_scale, score_sample, score_testset
from .setdist import DistanceReport, chamfer, chamfer_grad, emd_approx, emd_exact
from .training import DESK_TRAINING, LossBreakdown, TrainConfig, compute_loss, fit, kl_unit_gaussian

__all__ = [
    "LabeledDataset", "category_out_split", "load_manifest", "synth_generate",
    "ablation_tables", "auc", "category_out", "roc_curve", "seed_sweep",
    "fibonacci_sphere", "knn_graph", "local_covariance", "normalize", "random_sample",
    "DESK_CONFIG", "TINY_CONFIG", "LatentGaussian", "LossSpec", "ModelConfig", "ModelParams", "NoiseDraw",
    "decode", "encode", "init_params", "load_checkpoint", "param_gradients", "reparameterize", "save_checkpoint",
    "ScoreVariant", "n_scale", "score_sample", "score_testset",
    "DistanceReport", "chamfer", "chamfer_grad", "emd_approx", "emd_exact",
    "DESK_TRAINING", "LossBreakdown", "TrainConfig", "compute_loss", "fit", "kl_unit_gaussian",
    "__version__",
]
