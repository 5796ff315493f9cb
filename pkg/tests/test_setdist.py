import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, chamfer_loops, emd_permutations, relative_error
from pcanomaly import setdist
from pcanomaly.setdist import SetDistanceError


def cloud_pair(n_max=12, same_size=False):
    coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)

    @st.composite
    def pair(draw):
        n = draw(st.integers(1, n_max))
        m = n if same_size else draw(st.integers(1, n_max))
        S = draw(arrays(np.float64, (n, 3), elements=coords))
        T = draw(arrays(np.float64, (m, 3), elements=coords))
        return S, T
    return pair()


def rotation(seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


# -- chamfer -------------------------------------------------------------------

def test_chamfer_identical_is_zero():
    S = np.random.default_rng(0).normal(size=(20, 3))
    assert setdist.chamfer(S, S).value == 0.0


def test_chamfer_single_points():
    assert setdist.chamfer([[0, 0, 0]], [[3, 4, 0]]).value == 10.0


def test_chamfer_hand_example():
    assert setdist.chamfer([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]).value == 0.5


@settings(max_examples=80, deadline=None)
@given(cloud_pair())
def test_chamfer_matches_loops(pair):
    S, T = pair
    assert setdist.chamfer(S, T).value == pytest.approx(chamfer_loops(S, T), rel=1e-12, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(cloud_pair())
def test_chamfer_exactly_symmetric(pair):
    S, T = pair
    assert setdist.chamfer(S, T).value == setdist.chamfer(T, S).value


def test_chamfer_rotation_invariant():
    rng = np.random.default_rng(1)
    S, T = rng.normal(size=(30, 3)), rng.normal(size=(25, 3))
    R = rotation(2)
    assert setdist.chamfer(S @ R.T, T @ R.T).value == pytest.approx(setdist.chamfer(S, T).value, abs=1e-9)


def test_chamfer_matching_indices_in_range():
    rng = np.random.default_rng(3)
    report = setdist.chamfer(rng.normal(size=(9, 3)), rng.normal(size=(4, 3)))
    nn_st, nn_ts = report.matching
    assert nn_st.shape == (9,) and nn_ts.shape == (4,)
    assert nn_st.max() < 4 and nn_ts.max() < 9


def test_chamfer_tie_goes_to_lower_index():
    _, nn_st, _ = setdist.chamfer_batch(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    assert nn_st[0] == 0


def test_chamfer_batch_matches_single():
    rng = np.random.default_rng(4)
    S, T = rng.normal(size=(3, 15, 3)), rng.normal(size=(3, 11, 3))
    values, nn_st, nn_ts = setdist.chamfer_batch(S, T)
    for b in range(3):
        report = setdist.chamfer(S[b], T[b])
        assert values[b] == report.value
        np.testing.assert_array_equal(nn_st[b], report.matching[0])


def test_chamfer_empty_cloud():
    with pytest.raises(SetDistanceError):
        setdist.chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


# -- chamfer_grad ------------------------------------------------------------------

def test_chamfer_grad_identical_is_zero():
    S = np.random.default_rng(5).normal(size=(10, 3))
    np.testing.assert_array_equal(setdist.chamfer_grad(S, S.copy()), np.zeros((10, 3)))


def test_chamfer_grad_single_points():
    np.testing.assert_allclose(setdist.chamfer_grad([[0.0, 0, 0]], [[3.0, 4, 0]]), [[1.2, 1.6, 0]], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_grad_finite_differences(seed):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(16, 3)).astype(np.longdouble)
    T = rng.normal(size=(16, 3)).astype(np.longdouble)
    fd = central_difference(lambda x: setdist.chamfer_batch(S, x)[0], T, np.longdouble(1e-6))
    assert relative_error(setdist.chamfer_grad(S, T), fd).max() < 1e-6


def test_chamfer_grad_contributions_are_scaled_unit_vectors():
    # the lone T point takes a 1/|S| pull from each S point plus a full pull toward its own match
    S = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    T = np.array([[0.0, 0, 0]])
    g = setdist.chamfer_grad(S, T)
    np.testing.assert_allclose(g, [[-0.5 - 1.0, -0.5, 0]], atol=1e-15)


# -- emd -------------------------------------------------------------------

def test_emd_same_multiset_is_zero():
    assert setdist.emd_exact([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [0, 0, 0]]).value == 0.0


def test_emd_hand_example():
    assert setdist.emd_exact([[0, 0, 0], [0, 1, 0]], [[1, 0, 0], [1, 1, 0]]).value == pytest.approx(2.0, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(cloud_pair(n_max=6, same_size=True))
def test_emd_exact_matches_permutations(pair):
    S, T = pair
    assert setdist.emd_exact(S, T).value == pytest.approx(emd_permutations(S, T), abs=1e-9)


def test_emd_matching_is_permutation():
    rng = np.random.default_rng(6)
    for report in (setdist.emd_exact(rng.normal(size=(30, 3)), rng.normal(size=(30, 3))),
                   setdist.emd_approx(rng.normal(size=(30, 3)), rng.normal(size=(30, 3)), 1e-4)):
        assert sorted(report.matching) == list(range(30))


def test_emd_zero_only_for_equal_multisets():
    rng = np.random.default_rng(7)
    S = rng.normal(size=(12, 3))
    assert setdist.emd_exact(S, S[rng.permutation(12)]).value == 0.0
    T = S.copy()
    T[3, 0] += 1e-6
    assert setdist.emd_exact(S, T).value > 0.0


def test_emd_rotation_invariant():
    rng = np.random.default_rng(8)
    S, T = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    R = rotation(9)
    assert setdist.emd_exact(S @ R.T, T @ R.T).value == pytest.approx(setdist.emd_exact(S, T).value, abs=1e-9)


def test_emd_size_checks():
    with pytest.raises(SetDistanceError):
        setdist.emd_exact(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(SetDistanceError):
        setdist.emd_approx(np.zeros((3, 3)), np.zeros((4, 3)), 1e-3)
    big = np.zeros((setdist.EMD_EXACT_MAX + 1, 3))
    with pytest.raises(SetDistanceError, match="emd_approx"):
        setdist.emd_exact(big, big)


def test_emd_approx_identical_clouds():
    S = np.random.default_rng(10).normal(size=(40, 3))
    assert setdist.emd_approx(S, S, 1e-5).value <= 40 * 1e-5


@settings(max_examples=40, deadline=None)
@given(cloud_pair(n_max=6, same_size=True))
def test_emd_approx_close_to_permutations(pair):
    S, T = pair
    assert abs(setdist.emd_approx(S, T, 1e-6).value - emd_permutations(S, T)) < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_emd_approx_never_below_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    S, T = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    exact = setdist.emd_exact(S, T).value
    eps = 1e-3
    approx = setdist.emd_approx(S, T, eps).value
    assert exact - 1e-12 <= approx <= exact + n * eps


def test_emd_approx_rejects_bad_epsilon():
    with pytest.raises(SetDistanceError):
        setdist.emd_approx(np.zeros((2, 3)), np.ones((2, 3)), 0.0)


def test_auction_on_assignment_with_ties():
    benefit = np.zeros((5, 5))
    assert sorted(setdist.auction_assignment(benefit, 1e-6)) == list(range(5))
