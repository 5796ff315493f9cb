import math

import numpy as np
import pytest

import gradcheck
from oracles import relative_error
from pcanomaly import geometry
from pcanomaly.model import (
    DESK_CONFIG,
    TINY_CONFIG,
    LatentGaussian,
    LossSpec,
    ModelConfig,
    ModelError,
    ModelParams,
    NoiseDraw,
    decode,
    encode,
    init_params,
    kl_unit_gaussian,
    load_checkpoint,
    loss_backward,
    loss_forward,
    param_gradients,
    param_shapes,
    reparameterize,
    save_checkpoint,
)

K = 4


@pytest.fixture(scope="module")
def tiny():
    return init_params(TINY_CONFIG, seed=3)


@pytest.fixture(scope="module")
def cloud():
    return geometry.normalize(np.random.default_rng(0).normal(size=(32, 3)))


# -- parameters -------------------------------------------------------------------

def test_default_parameter_count():
    # point MLP 12-64-64-64, graph 64-128 and 128-1024, fc 1216-512, two 512-512 heads,
    # two folds of 515-512-512-3
    assert ModelParams(ModelConfig()).size == 2354758


def test_parameter_count_matches_shapes():
    for cfg in (TINY_CONFIG, DESK_CONFIG):
        assert ModelParams(cfg).size == sum(math.prod(s) for s in param_shapes(cfg).values())


def test_init_deterministic():
    a, b = init_params(TINY_CONFIG, 7), init_params(TINY_CONFIG, 7)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, init_params(TINY_CONFIG, 8).flat)


def test_init_bounds(tiny):
    for name, shape in tiny.shapes.items():
        if name.endswith(".W"):
            assert np.abs(tiny[name]).max() < 1 / math.sqrt(shape[0])
        else:
            assert not tiny[name].any()


def test_flat_view_round_trip(tiny):
    p = tiny.copy()
    p["enc.fc.b"][...] = 5.0
    assert np.all(p.flat[p.slice_of("enc.fc.b")] == 5.0)
    q = ModelParams(p.config, p.flat.copy())
    np.testing.assert_array_equal(q["enc.fc.b"], p["enc.fc.b"])


def test_config_rejects_nonpositive():
    with pytest.raises(ModelError):
        ModelConfig(latent_dim=0)


# -- encoder ----------------------------------------------------------------------

def test_encode_shapes(tiny, cloud):
    lat = encode(tiny, cloud, K)
    assert lat.mu.shape == lat.logvar.shape == (TINY_CONFIG.latent_dim,)


def test_encode_default_latent_length():
    pts = geometry.normalize(np.random.default_rng(1).normal(size=(40, 3)))
    assert encode(init_params(ModelConfig(), 0), pts, 16).mu.shape == (512,)


def test_encode_permutation_invariant(tiny, cloud):
    a = encode(tiny, cloud, K)
    perm = np.random.default_rng(2).permutation(len(cloud))
    b = encode(tiny, cloud[perm], K)
    np.testing.assert_allclose(b.mu, a.mu, atol=1e-9)
    np.testing.assert_allclose(b.logvar, a.logvar, atol=1e-9)


def test_encode_not_translation_invariant(tiny, cloud):
    assert not np.allclose(encode(tiny, cloud + [0.5, 0, 0], K).mu, encode(tiny, cloud, K).mu)


def test_encode_needs_more_than_k_points(tiny):
    with pytest.raises(ModelError):
        encode(tiny, np.zeros((K, 3)), K)


# -- latent -----------------------------------------------------------------------

def test_reparameterize_examples():
    lat = LatentGaussian(np.array([1.0, 1.0]), np.log([4.0, 4.0]))
    np.testing.assert_allclose(reparameterize(lat, np.array([1.0, -1.0])), [3.0, -1.0])
    np.testing.assert_array_equal(reparameterize(lat, np.zeros(2)), lat.mu)
    eps = np.array([0.3, -2.0])
    np.testing.assert_array_equal(reparameterize(LatentGaussian(np.zeros(2), np.zeros(2)), NoiseDraw(eps)), eps)


def test_reparameterize_dimension_mismatch():
    with pytest.raises(ModelError):
        reparameterize(LatentGaussian(np.zeros(3), np.zeros(3)), np.zeros(2))


def test_kl_examples():
    assert kl_unit_gaussian(np.zeros(8), np.zeros(8)) == 0.0
    assert kl_unit_gaussian(np.ones(512), np.zeros(512)) == 256.0


def test_kl_nonnegative():
    rng = np.random.default_rng(4)
    vals = kl_unit_gaussian(rng.normal(size=(200, 16)) * 3, rng.normal(size=(200, 16)) * 3)
    assert np.all(vals >= 0)


# -- decoder ----------------------------------------------------------------------

def test_decode_shape_and_determinism(tiny):
    z = np.random.default_rng(5).normal(size=TINY_CONFIG.latent_dim)
    grid = geometry.fibonacci_sphere(50)
    out = decode(tiny, z, grid)
    assert out.shape == (50, 3)
    np.testing.assert_array_equal(out, decode(tiny, z, grid))


def test_decode_grid_permutation_equivariant(tiny):
    z = np.random.default_rng(6).normal(size=TINY_CONFIG.latent_dim)
    grid = geometry.fibonacci_sphere(40)
    perm = np.random.default_rng(7).permutation(40)
    np.testing.assert_allclose(decode(tiny, z, grid[perm]), decode(tiny, z, grid)[perm], atol=1e-12)


def test_decode_bad_codeword(tiny):
    with pytest.raises(ModelError):
        decode(tiny, np.zeros(3), geometry.fibonacci_sphere(4))


# -- gradients --------------------------------------------------------------------

def zero_heads(params):
    p = params.copy()
    for name in ("enc.mu.W", "enc.mu.b", "enc.logvar.W", "enc.logvar.b"):
        p[name][...] = 0.0
    return p


def test_kl_only_gradient_vanishes_at_minimum(tiny, cloud):
    p = zero_heads(tiny)
    g = ModelParams(p.config, param_gradients(p, cloud, np.ones(8), geometry.fibonacci_sphere(16), K,
                                              LossSpec(lrec=False, kl_rec=False)))
    for name in ("enc.mu.W", "enc.mu.b", "enc.logvar.W", "enc.logvar.b"):
        assert not g[name].any()


def test_dead_path_gradients_are_exactly_zero(tiny, cloud):
    g = ModelParams(tiny.config, param_gradients(tiny, cloud, np.ones(8), geometry.fibonacci_sphere(16), K,
                                                 LossSpec(lrec=False, kl_rec=False)))
    for name in g.shapes:
        if name.startswith("dec."):
            assert not g[name].any(), name
    assert g["enc.mu.W"].any()


def test_lrec_reaches_every_layer(tiny, cloud):
    g = ModelParams(tiny.config, param_gradients(tiny, cloud, np.ones(8), geometry.fibonacci_sphere(16), K,
                                                 LossSpec(kl_ori=False, kl_rec=False)))
    assert g["dec.fold1.0.W"].any() and g["enc.point0.W"].any()


def test_gradient_noise_shape_checked(tiny, cloud):
    with pytest.raises(ModelError):
        param_gradients(tiny, cloud, np.ones(5), geometry.fibonacci_sphere(16), K)


def test_kl_rec_gradient_needs_forward_term(tiny, cloud):
    _, state = loss_forward(tiny, cloud[None], np.ones((1, 8)), geometry.fibonacci_sphere(16), K, kl_rec=False)
    with pytest.raises(ModelError):
        loss_backward(tiny, state, LossSpec())


@pytest.mark.parametrize("spec", [LossSpec(), LossSpec(kl_rec=False), LossSpec(kl_reduction="mean"),
                                  LossSpec(kl_scale=0.01)],
                         ids=["full", "no_kl_rec", "mean_kl", "scaled_kl"])
def test_gradient_matches_finite_differences(spec):
    params, cloud, eps, grid = gradcheck.case(TINY_CONFIG, seed=11, cloud_seed=12)
    analytic, numeric = gradcheck.check(params, cloud, eps, grid, K, spec)
    assert relative_error(analytic, numeric).max() < 1e-3


def test_batch_gradient_is_weighted_sum(tiny):
    rng = np.random.default_rng(8)
    clouds = rng.normal(size=(3, 32, 3))
    eps = rng.normal(size=(3, 8))
    grid = geometry.fibonacci_sphere(16)
    _, state = loss_forward(tiny, clouds, eps, grid, K)
    batch = loss_backward(tiny, state, LossSpec(), np.full(3, 1 / 3)).flat
    singles = sum(param_gradients(tiny, clouds[b], eps[b], grid, K) for b in range(3)) / 3
    np.testing.assert_allclose(batch, singles, rtol=1e-9, atol=1e-12)


def test_mean_reduction_scales_kl_terms(tiny, cloud):
    eps = np.ones((1, 8))
    grid = geometry.fibonacci_sphere(16)
    full, _ = loss_forward(tiny, cloud[None], eps, grid, K)
    mean, _ = loss_forward(tiny, cloud[None], eps, grid, K, kl_weight=LossSpec(kl_reduction="mean").kl_weight(8))
    assert mean.lrec[0] == full.lrec[0]
    assert mean.kl_ori[0] == pytest.approx(full.kl_ori[0] / 8)
    assert mean.kl_rec[0] == pytest.approx(full.kl_rec[0] / 8)


def test_kl_weight_combines_scale_and_reduction():
    assert LossSpec().kl_weight(64) == 1.0
    assert LossSpec(kl_scale=1e-4).kl_weight(64) == 1e-4
    assert LossSpec(kl_reduction="mean", kl_scale=0.5).kl_weight(8) == 0.0625


def test_loss_spec_rejects_unknown_reduction():
    with pytest.raises(ModelError):
        LossSpec(kl_reduction="max")
    for bad in (-1.0, float("nan"), float("inf")):
        with pytest.raises(ModelError):
            LossSpec(kl_scale=bad)


# -- checkpoints ------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    p = init_params(TINY_CONFIG, 1, dtype=dtype)
    save_checkpoint(tmp_path / "a.ckpt", p, {"note": "x"})
    q, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert q.config == p.config and q.dtype == p.dtype and meta == {"note": "x"}
    np.testing.assert_array_equal(q.flat, p.flat)


def test_checkpoint_bytes_deterministic(tmp_path):
    p = init_params(TINY_CONFIG, 1)
    save_checkpoint(tmp_path / "a.ckpt", p, {"b": 1, "a": 2})
    save_checkpoint(tmp_path / "b.ckpt", p.copy(), {"a": 2, "b": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "x.ckpt")
