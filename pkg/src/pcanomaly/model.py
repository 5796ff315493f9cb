"""Variational autoencoder for point clouds with a hand-written backward pass.

Encoder: per-point input is xyz plus the 9 local-covariance features; a
shared point MLP is followed by graph layers (neighbor max-pool, then
linear+ReLU). The global max-pools of the last point stage and of every graph
stage are concatenated (the skip connection), passed through one
linear+ReLU layer, and split into mean and log-variance heads.

Decoder: two folding stages. Each one concatenates the codeword to every
input point (sphere grid points for the first fold, first-fold output for the
second) and runs a shared 3-layer MLP down to 3 coordinates.

All forward functions work on batches: clouds are ``(B, n, 3)``. Discrete
choices (k-NN graphs, ReLU masks, max-pool argmaxes, Chamfer matchings) are
routed through a :class:`Selections` log so a forward pass can be replayed on
the same piecewise-smooth branch, which is what the gradients differentiate.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels, geometry
from .setdist import chamfer_batch, chamfer_grad_batch

CHECKPOINT_MAGIC = b"PCAVAE\n"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Layer widths. The defaults are the canonical architecture."""

    latent_dim: int = 512
    point_widths: tuple[int, ...] = (64, 64, 64)
    graph_widths: tuple[int, ...] = (128, 1024)
    fc_width: int = 512
    fold_width: int = 512

    def __post_init__(self):
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "graph_widths", tuple(int(w) for w in self.graph_widths))
        dims = (self.latent_dim, self.fc_width, self.fold_width) + self.point_widths + self.graph_widths
        if not self.point_widths or any(int(v) < 1 for v in dims):
            raise ModelError(f"all model dimensions must be positive: {self}")

    @property
    def skip_width(self) -> int:
        return self.point_widths[-1] + sum(self.graph_widths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# d=8 model used for exhaustive finite-difference checks
TINY_CONFIG = ModelConfig(latent_dim=8, point_widths=(8, 8, 8), graph_widths=(12, 16), fc_width=16, fold_width=16)
# narrower d=64 model that trains on a single CPU core in minutes
DESK_CONFIG = ModelConfig(latent_dim=64, point_widths=(32, 32, 32), graph_widths=(64, 128), fc_width=128, fold_width=64)

PRESETS = {"paper": ModelConfig(), "desk": DESK_CONFIG, "tiny": TINY_CONFIG}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; weights are stored ``(fan_in, fan_out)``."""
    shapes: dict[str, tuple[int, ...]] = {}

    def dense(name, fan_in, fan_out):
        shapes[f"{name}.W"] = (fan_in, fan_out)
        shapes[f"{name}.b"] = (fan_out,)

    width = 12
    for i, w in enumerate(config.point_widths):
        dense(f"enc.point{i}", width, w)
        width = w
    for i, w in enumerate(config.graph_widths):
        dense(f"enc.graph{i}", width, w)
        width = w
    dense("enc.fc", config.skip_width, config.fc_width)
    dense("enc.mu", config.fc_width, config.latent_dim)
    dense("enc.logvar", config.fc_width, config.latent_dim)
    h = config.fold_width
    for fold in (1, 2):
        dense(f"dec.fold{fold}.0", config.latent_dim + 3, h)
        dense(f"dec.fold{fold}.1", h, h)
        dense(f"dec.fold{fold}.2", h, 3)
    return shapes


class ModelParams:
    """All encoder and decoder weights backed by one flat vector.

    ``params["enc.fc.W"]`` is a writable view into ``params.flat``.
    """

    def __init__(self, config: ModelConfig, flat=None, dtype=np.float64):
        self.config = config
        self.shapes = param_shapes(config)
        size = sum(math.prod(s) for s in self.shapes.values())
        if flat is None:
            flat = np.zeros(size, dtype=dtype)
        flat = np.asarray(flat)
        if flat.shape != (size,):
            raise ModelError(f"flat vector has shape {flat.shape}, expected ({size},)")
        self.flat = flat
        self._views = {}
        offset = 0
        for name, shape in self.shapes.items():
            n = math.prod(shape)
            self._views[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        if value is not view:
            view[...] = value

    def __iter__(self):
        return iter(self._views)

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def dtype(self):
        return self.flat.dtype

    def slice_of(self, name: str) -> slice:
        offset = 0
        for key, shape in self.shapes.items():
            n = math.prod(shape)
            if key == name:
                return slice(offset, offset + n)
            offset += n
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.flat.astype(dtype))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, np.zeros_like(self.flat))


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Weights uniform in ``(-1/sqrt(fan_in), 1/sqrt(fan_in))``, biases zero."""
    params = ModelParams(config, dtype=dtype)
    rng = np.random.default_rng(seed)
    for name, shape in params.shapes.items():
        if name.endswith(".W"):
            bound = 1.0 / math.sqrt(shape[0])
            params[name][...] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class LatentGaussian:
    """Diagonal Gaussian ``N(mu, exp(logvar))``; arrays are ``(d,)`` or ``(B, d)``."""

    mu: np.ndarray
    logvar: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


@dataclass
class NoiseDraw:
    """Standard-normal draw used by the reparameterization."""

    epsilon: np.ndarray
    seed: int | None = None


def draw_noise(d: int, seed: int, batch: int | None = None) -> NoiseDraw:
    rng = np.random.default_rng(seed)
    shape = (d,) if batch is None else (batch, d)
    return NoiseDraw(rng.standard_normal(shape), seed)


@dataclass(frozen=True)
class LossSpec:
    """Which terms of ``L = Lrec + KL_ori + KL_rec`` a gradient covers."""

    lrec: bool = True
    kl_ori: bool = True
    kl_rec: bool = True
    kl_reduction: str = "sum"
    kl_scale: float = 1.0

    def __post_init__(self):
        if self.kl_reduction not in ("sum", "mean"):
            raise ModelError(f"kl_reduction must be 'sum' or 'mean', got {self.kl_reduction!r}")
        if not (math.isfinite(self.kl_scale) and self.kl_scale >= 0):
            raise ModelError(f"kl_scale must be finite and non-negative, got {self.kl_scale!r}")

    def kl_weight(self, latent_dim: int) -> float:
        """Factor applied to the summed KL terms.

        ``kl_scale``, divided by ``d`` for a per-dimension mean.
        """
        return self.kl_scale if self.kl_reduction == "sum" else self.kl_scale / latent_dim


class Selections:
    """Ordered log of the discrete choices made during a forward pass.

    Built with ``replay=other``, each choice is taken from ``other`` in the
    same order instead of being recomputed.
    """

    def __init__(self, replay: "Selections | None" = None):
        self.log: list = []
        self._replay = None if replay is None else iter(replay.log)

    def __call__(self, compute):
        choice = compute() if self._replay is None else next(self._replay)
        self.log.append(choice)
        return choice


def kl_unit_gaussian(mu, logvar) -> np.ndarray:
    """``KL(N(mu, exp(logvar)) || N(0, I))`` summed over the last axis."""
    mu = np.asarray(mu)
    logvar = np.asarray(logvar)
    return -0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar), axis=-1)


def reparameterize(latent: LatentGaussian, noise) -> np.ndarray:
    """``z = mu + eps * exp(logvar / 2)``."""
    eps = noise.epsilon if isinstance(noise, NoiseDraw) else np.asarray(noise)
    if eps.shape[-1] != latent.mu.shape[-1]:
        raise ModelError(f"noise has dimension {eps.shape[-1]}, latent has {latent.mu.shape[-1]}")
    return latent.mu + eps * latent.sigma


# ---------------------------------------------------------------------------
# building blocks

def _dense(x, W, b=None):
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]) @ W
    if b is not None:
        out += b
    return out.reshape(lead + (W.shape[1],))


def _matmul_t(x, dy):
    """``sum over rows of x^T dy`` for batched rows."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _relu(a, sel):
    """ReLU that overwrites its (temporary) input."""
    mask = sel(lambda: a > 0)
    np.multiply(a, mask, out=a)
    return a, mask


def _batch_index(B, ndim):
    return np.arange(B).reshape((B,) + (1,) * (ndim - 1))


def _neighbor_pool(h, graph, sel):
    """Channel-wise max over each point's neighbors.

    Returns the pooled features and the flat source index of every pooled
    value, which the backward pass scatters into.
    """
    B, n, C = h.shape
    k = graph.shape[-1]
    rows = h.reshape(B * n, C)
    graph_rows = graph + (np.arange(B) * n)[:, None, None]

    def choose():
        if _kernels.usable(h):
            return _kernels.pool_choose(rows, graph_rows.reshape(B * n, k)).reshape(B, n, C)
        best = rows.take(graph_rows[..., 0].ravel(), axis=0)
        arg = np.zeros((B * n, C), dtype=np.int16)
        better = np.empty(best.shape, dtype=bool)
        for j in range(1, k):
            col = rows.take(graph_rows[..., j].ravel(), axis=0)
            np.greater(col, best, out=better)  # strict: ties keep the earlier neighbor
            np.maximum(best, col, out=best)
            np.copyto(arg, j, where=better)
        return np.take_along_axis(graph_rows, arg.reshape(B, n, C), axis=-1) * C + np.arange(C)

    flat = sel(choose)
    return h.reshape(-1).take(flat), flat


def _neighbor_pool_backward(dpooled, flat):
    return _scatter_add(flat.ravel(), dpooled.ravel(), dpooled.size).reshape(dpooled.shape)


def _global_pool(h, sel):
    arg = sel(lambda: _kernels.argmax_points(h) if _kernels.usable(h) else h.argmax(axis=1))
    return np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :], arg


def _global_pool_backward(dg, arg, shape):
    out = np.zeros(shape, dtype=dg.dtype)
    np.put_along_axis(out, arg[:, None, :], dg[:, None, :], axis=1)
    return out


def _covariance_backward(G, centered, graph):
    """Gradient on the points from the gradient ``G`` on each neighbor covariance.

    The neighbor-mean term drops out because centered neighbors sum to zero.
    """
    if _kernels.usable(G, centered):
        return _kernels.cov_backward(G, centered, graph).astype(G.dtype, copy=False)
    k = graph.shape[-1]
    S = G + np.swapaxes(G, -1, -2)
    c = centered
    dnbr = np.stack([(S[..., a, 0, None] * c[..., 0] + S[..., a, 1, None] * c[..., 1]
                      + S[..., a, 2, None] * c[..., 2]) / k for a in range(3)], axis=-1)
    return _scatter_points(dnbr, graph, graph.shape[1])


def _scatter_points(dnbr, graph, n):
    """Sum per-neighbor 3-vectors ``(B, n, k, 3)`` back onto point indices."""
    B = dnbr.shape[0]
    flat = (np.arange(B)[:, None, None] * n + graph).ravel()
    vec = dnbr.reshape(-1, 3)
    out = np.stack([_scatter_add(flat, vec[:, c], B * n) for c in range(3)], axis=-1)
    return out.reshape(B, n, 3)


def _scatter_add(index, values, size):
    if _kernels.usable(values):
        return _kernels.scatter_add(index, values, size).astype(values.dtype, copy=False)
    if values.dtype in (np.float32, np.float64):
        return np.bincount(index, weights=values, minlength=size).astype(values.dtype, copy=False)
    # bincount accumulates in float64; keep extended precision intact
    out = np.zeros(size, dtype=values.dtype)
    np.add.at(out, index, values)
    return out


# ---------------------------------------------------------------------------
# encoder

def encode_forward(params: ModelParams, clouds, k: int, sel: Selections | None = None, graph=None):
    """Batched encoder. Returns ``(mu, logvar, cache)``.

    ``graph`` may supply precomputed k-NN indices for ``clouds``.
    """
    sel = sel if sel is not None else Selections()
    cfg = params.config
    P = np.asarray(clouds, dtype=params.dtype)
    if P.ndim != 3 or P.shape[-1] != 3:
        raise ModelError(f"expected clouds of shape (B, n, 3), got {P.shape}")
    if P.shape[1] <= k:
        raise ModelError(f"encoder needs more than k={k} points per cloud, got {P.shape[1]}")
    if graph is None:
        graph = sel(lambda: geometry.knn_graph(P, k))
    elif graph.shape != P.shape[:2] + (k,):
        raise ModelError(f"graph of shape {graph.shape} does not fit clouds {P.shape} with k={k}")
    centered, cov = geometry.neighbor_covariance(P, graph)
    x = np.concatenate([P, cov.reshape(P.shape[:2] + (9,))], axis=-1)

    cache = {"graph": graph, "centered": centered, "n": P.shape[1], "dtype": params.dtype}
    inputs, masks = [], []
    for i in range(len(cfg.point_widths)):
        inputs.append(x)
        x, mask = _relu(_dense(x, params[f"enc.point{i}.W"], params[f"enc.point{i}.b"]), sel)
        masks.append(mask)
    cache["point_inputs"], cache["point_masks"] = inputs, masks

    stages = [x]
    pooled_list, pool_args, graph_masks = [], [], []
    for i in range(len(cfg.graph_widths)):
        pooled, arg = _neighbor_pool(x, graph, sel)
        x, mask = _relu(_dense(pooled, params[f"enc.graph{i}.W"], params[f"enc.graph{i}.b"]), sel)
        pooled_list.append(pooled)
        pool_args.append(arg)
        graph_masks.append(mask)
        stages.append(x)
    cache["pooled"], cache["pool_args"], cache["graph_masks"] = pooled_list, pool_args, graph_masks

    globals_, global_args = [], []
    for h in stages:
        g, arg = _global_pool(h, sel)
        globals_.append(g)
        global_args.append(arg)
    cache["stage_shapes"] = [h.shape for h in stages]
    cache["global_args"] = global_args
    feat = np.concatenate(globals_, axis=-1)
    f, fmask = _relu(feat @ params["enc.fc.W"] + params["enc.fc.b"], sel)
    cache["feat"], cache["f"], cache["fmask"] = feat, f, fmask
    mu = f @ params["enc.mu.W"] + params["enc.mu.b"]
    logvar = f @ params["enc.logvar.W"] + params["enc.logvar.b"]
    return mu, logvar, cache


def encode_backward(params: ModelParams, cache, dmu, dlogvar, grads: ModelParams, input_grad: bool = False):
    """Accumulate encoder parameter gradients into ``grads``.

    Returns the gradient with respect to the input clouds when
    ``input_grad`` is set, else ``None``. k-NN graphs and max-pool choices
    are treated as constants.
    """
    cfg = params.config
    f = cache["f"]
    grads["enc.mu.W"] += f.T @ dmu
    grads["enc.mu.b"] += dmu.sum(axis=0)
    grads["enc.logvar.W"] += f.T @ dlogvar
    grads["enc.logvar.b"] += dlogvar.sum(axis=0)
    df = dmu @ params["enc.mu.W"].T + dlogvar @ params["enc.logvar.W"].T
    da = df * cache["fmask"]
    grads["enc.fc.W"] += cache["feat"].T @ da
    grads["enc.fc.b"] += da.sum(axis=0)
    dfeat = da @ params["enc.fc.W"].T

    widths = [cfg.point_widths[-1]] + list(cfg.graph_widths)
    offsets = np.cumsum([0] + widths)
    dstages = [
        _global_pool_backward(dfeat[:, offsets[s]:offsets[s + 1]], cache["global_args"][s], cache["stage_shapes"][s])
        for s in range(len(widths))
    ]

    graph = cache["graph"]
    dh = dstages[-1]
    for i in reversed(range(len(cfg.graph_widths))):
        da = dh * cache["graph_masks"][i]
        grads[f"enc.graph{i}.W"] += _matmul_t(cache["pooled"][i], da)
        grads[f"enc.graph{i}.b"] += da.sum(axis=(0, 1))
        dpooled = _dense(da, params[f"enc.graph{i}.W"].T)
        dh = dstages[i] + _neighbor_pool_backward(dpooled, cache["pool_args"][i])

    for i in reversed(range(len(cfg.point_widths))):
        da = dh * cache["point_masks"][i]
        grads[f"enc.point{i}.W"] += _matmul_t(cache["point_inputs"][i], da)
        grads[f"enc.point{i}.b"] += da.sum(axis=(0, 1))
        if i > 0 or input_grad:
            dh = _dense(da, params[f"enc.point{i}.W"].T)

    if not input_grad:
        return None
    dP = dh[..., :3].copy()
    G = np.ascontiguousarray(dh[..., 3:]).reshape(dh.shape[:2] + (3, 3))
    dP += _covariance_backward(G, cache["centered"], graph)
    return dP


def encode_batch(params: ModelParams, clouds, k: int) -> LatentGaussian:
    mu, logvar, _ = encode_forward(params, clouds, k)
    return LatentGaussian(mu, logvar)


def encode(params: ModelParams, cloud, k: int) -> LatentGaussian:
    """Encode one ``(n, 3)`` cloud into a latent Gaussian."""
    cloud = geometry.as_cloud(cloud)
    mu, logvar, _ = encode_forward(params, cloud[None], k)
    return LatentGaussian(mu[0], logvar[0])


# ---------------------------------------------------------------------------
# decoder

def decode_forward(params: ModelParams, z, grid, sel: Selections | None = None):
    """Batched two-fold decoder. ``z`` is ``(B, d)``, ``grid`` is ``(m, 3)``."""
    sel = sel if sel is not None else Selections()
    d = params.config.latent_dim
    z = np.asarray(z, dtype=params.dtype)
    grid = np.asarray(grid, dtype=params.dtype)
    if z.ndim != 2 or z.shape[1] != d:
        raise ModelError(f"codeword must have shape (B, {d}), got {z.shape}")
    if grid.ndim != 2 or grid.shape[1] != 3 or grid.shape[0] < 1:
        raise ModelError(f"grid must have shape (m, 3) with m >= 1, got {grid.shape}")
    cache = {"z": z, "grid": grid, "folds": []}
    points = np.broadcast_to(grid, (z.shape[0],) + grid.shape)
    for fold in (1, 2):
        pre = f"dec.fold{fold}"
        W0 = params[f"{pre}.0.W"]
        a0 = (z @ W0[:d])[:, None, :] + _dense(points, W0[d:], params[f"{pre}.0.b"])
        h0, m0 = _relu(a0, sel)
        h1, m1 = _relu(_dense(h0, params[f"{pre}.1.W"], params[f"{pre}.1.b"]), sel)
        out = _dense(h1, params[f"{pre}.2.W"], params[f"{pre}.2.b"])
        cache["folds"].append({"points": points, "h0": h0, "m0": m0, "h1": h1, "m1": m1})
        points = out
    return points, cache


def decode_backward(params: ModelParams, cache, dout, grads: ModelParams) -> np.ndarray:
    """Accumulate decoder gradients; returns the gradient on the codewords."""
    d = params.config.latent_dim
    z = cache["z"]
    dz = np.zeros_like(z)
    dpoints = dout
    for fold in (2, 1):
        pre = f"dec.fold{fold}"
        c = cache["folds"][fold - 1]
        grads[f"{pre}.2.W"] += _matmul_t(c["h1"], dpoints)
        grads[f"{pre}.2.b"] += dpoints.sum(axis=(0, 1))
        da1 = _dense(dpoints, params[f"{pre}.2.W"].T) * c["m1"]
        grads[f"{pre}.1.W"] += _matmul_t(c["h0"], da1)
        grads[f"{pre}.1.b"] += da1.sum(axis=(0, 1))
        da0 = _dense(da1, params[f"{pre}.1.W"].T) * c["m0"]
        W0 = params[f"{pre}.0.W"]
        da0_sum = da0.sum(axis=1)
        grads[f"{pre}.0.W"][:d] += z.T @ da0_sum
        grads[f"{pre}.0.W"][d:] += _matmul_t(c["points"], da0)
        grads[f"{pre}.0.b"] += da0_sum.sum(axis=0)
        dz += da0_sum @ W0[:d].T
        if fold == 2:
            dpoints = _dense(da0, W0[d:].T)
    return dz


def decode_batch(params: ModelParams, z, grid) -> np.ndarray:
    out, _ = decode_forward(params, z, grid)
    return out


def decode(params: ModelParams, z, grid) -> np.ndarray:
    """Decode one codeword ``(d,)`` onto ``grid`` and return ``(m, 3)`` points."""
    out, _ = decode_forward(params, np.asarray(z)[None], grid)
    return out[0]


# ---------------------------------------------------------------------------
# composite loss

@dataclass
class LossTerms:
    """Per-sample loss terms, each of shape ``(B,)``."""

    lrec: np.ndarray
    kl_ori: np.ndarray
    kl_rec: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.lrec + self.kl_ori + self.kl_rec


@dataclass
class ForwardState:
    clouds: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    recon: np.ndarray
    enc_cache: dict
    dec_cache: dict
    nn_st: np.ndarray
    nn_ts: np.ndarray
    mu_rec: np.ndarray | None = None
    logvar_rec: np.ndarray | None = None
    rec_cache: dict | None = field(default=None, repr=False)


def loss_forward(params, clouds, eps, grid, k, kl_rec=True, sel=None, kl_weight=1.0, graph=None):
    """Forward pass of ``Lrec + KL_ori (+ KL_rec)`` for a batch.

    Returns ``(LossTerms, ForwardState)``. With ``kl_rec`` off the
    reconstruction is not re-encoded and that term is zero. Both KL terms
    are multiplied by ``kl_weight``. ``graph`` optionally holds the
    precomputed k-NN indices of ``clouds``.
    """
    sel = sel if sel is not None else Selections()
    clouds = np.asarray(clouds, dtype=params.dtype)
    eps = np.asarray(eps, dtype=params.dtype)
    if eps.shape != (clouds.shape[0], params.config.latent_dim):
        raise ModelError(f"noise shape {eps.shape} does not match batch and latent size")
    mu, logvar, enc_cache = encode_forward(params, clouds, k, sel, graph)
    z = mu + eps * np.exp(0.5 * logvar)
    recon, dec_cache = decode_forward(params, z, grid, sel)
    lrec, nn_st, nn_ts = _chamfer_selected(clouds, recon, sel)
    state = ForwardState(clouds, eps, mu, logvar, z, recon, enc_cache, dec_cache, nn_st, nn_ts)
    kl_ori = kl_weight * kl_unit_gaussian(mu, logvar)
    if kl_rec:
        mu_r, logvar_r, rec_cache = encode_forward(params, recon, k, sel)
        state.mu_rec, state.logvar_rec, state.rec_cache = mu_r, logvar_r, rec_cache
        kl_r = kl_weight * kl_unit_gaussian(mu_r, logvar_r)
    else:
        kl_r = np.zeros_like(kl_ori)
    return LossTerms(lrec, kl_ori, kl_r), state


def _chamfer_selected(S, T, sel):
    nn = sel(lambda: chamfer_batch(S, T)[1:])
    nn_st, nn_ts = nn
    d_st = _norm(S - np.take_along_axis(T, nn_st[..., None], axis=1))
    d_ts = _norm(T - np.take_along_axis(S, nn_ts[..., None], axis=1))
    return d_st.mean(axis=-1) + d_ts.mean(axis=-1), nn_st, nn_ts


def _norm(v):
    # same arithmetic as setdist.pairwise_distances, so values agree bit for bit
    return np.sqrt(geometry.sq_norm(v))


def loss_backward(params, state: ForwardState, spec: LossSpec, weights=None) -> ModelParams:
    """Gradient of ``sum_b weights[b] * loss_b`` over the terms in ``spec``."""
    B = state.clouds.shape[0]
    w = np.ones(B, dtype=params.dtype) if weights is None else np.asarray(weights, dtype=params.dtype)
    wk = w * spec.kl_weight(params.config.latent_dim)
    grads = params.zeros_like()
    if spec.kl_rec and state.rec_cache is None:
        raise ModelError("KL_rec gradient requested but the forward pass skipped it")

    sigma = np.exp(0.5 * state.logvar)
    dmu = np.zeros_like(state.mu)
    dlogvar = np.zeros_like(state.logvar)
    if spec.kl_ori:
        dmu += wk[:, None] * state.mu
        dlogvar += wk[:, None] * 0.5 * (np.exp(state.logvar) - 1.0)

    if spec.lrec or spec.kl_rec:
        drecon = np.zeros_like(state.recon)
        if spec.lrec:
            drecon += w[:, None, None] * chamfer_grad_batch(state.clouds, state.recon, state.nn_st, state.nn_ts)
        if spec.kl_rec:
            dmu_r = wk[:, None] * state.mu_rec
            dlv_r = wk[:, None] * 0.5 * (np.exp(state.logvar_rec) - 1.0)
            drecon += encode_backward(params, state.rec_cache, dmu_r, dlv_r, grads, input_grad=True)
        dz = decode_backward(params, state.dec_cache, drecon, grads)
        dmu += dz
        dlogvar += dz * state.eps * sigma * 0.5

    encode_backward(params, state.enc_cache, dmu, dlogvar, grads)
    return grads


def param_gradients(params: ModelParams, cloud, noise, grid, k: int, spec: LossSpec = LossSpec()) -> np.ndarray:
    """Flat gradient of the selected loss terms for a single cloud."""
    eps = noise.epsilon if isinstance(noise, NoiseDraw) else np.asarray(noise)
    if eps.shape != (params.config.latent_dim,):
        raise ModelError(f"noise must have shape ({params.config.latent_dim},), got {eps.shape}")
    cloud = geometry.as_cloud(cloud)
    _, state = loss_forward(params, cloud[None], eps[None], grid, k, kl_rec=spec.kl_rec,
                            kl_weight=spec.kl_weight(params.config.latent_dim))
    return loss_backward(params, state, spec).flat


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    """Write config, metadata and the flat parameter vector.

    Layout: magic line, little-endian uint32 header length, JSON header,
    raw little-endian parameter bytes. Output is byte-deterministic.
    """
    flat = np.ascontiguousarray(params.flat, dtype=params.dtype.newbyteorder("<"))
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "dtype": params.dtype.str.lstrip("<>=|"),
        "size": int(params.size),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(flat.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ModelError(f"{path} is not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["model_config"])
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    flat = np.frombuffer(data, dtype=dtype, count=header["size"], offset=pos).astype(dtype.newbyteorder("="))
    return ModelParams(config, flat), header["meta"]
