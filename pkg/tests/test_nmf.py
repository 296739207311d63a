import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from nmfrisk.exceptions import DataError, InvalidParameterError
from nmfrisk.nmf import (
    ErrorCurve,
    SparseNMF,
    elbow,
    find_elbow,
    fit_nmf,
    read_error_curve,
    read_factor_model,
    reconstruction_error,
    sweep_k,
    write_error_curve,
    write_factor_model,
)


def test_hand_rank_one_example():
    X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
    model = fit_nmf(X, 1, seed=0, max_iter=500, tol=0)
    assert model.final_error < 1e-12
    np.testing.assert_allclose(model.W @ model.H, X, atol=1e-12)


def test_error_matches_dense_norm(rng):
    X = sp.random(30, 20, density=0.2, random_state=1, format="csr")
    W, H = rng.random((30, 3)), rng.random((3, 20))
    assert reconstruction_error(X, W, H) == pytest.approx(np.linalg.norm(X.toarray() - W @ H), rel=1e-12)


def test_seeded_fit_is_reproducible(rng):
    X = rng.random((20, 10))
    a, b = fit_nmf(X, 3, seed=5), fit_nmf(X, 3, seed=5)
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.H, b.H)
    assert not np.array_equal(a.W, fit_nmf(X, 3, seed=6).W)


def test_invalid_rank_and_input():
    X = np.ones((4, 3))
    for k in (0, 4):
        with pytest.raises(InvalidParameterError):
            fit_nmf(X, k)
    with pytest.raises(DataError):
        fit_nmf(-X, 1)


def test_all_zero_matrix():
    model = fit_nmf(np.zeros((3, 3)), 2)
    assert model.final_error == 0.0 and not model.W.any() and not model.H.any()


def test_tolerance_stops_early(rng):
    X = rng.random((40, 25))
    loose = fit_nmf(X, 4, seed=0, max_iter=5000, tol=1e-3)
    assert loose.converged and loose.n_iterations < 5000
    assert loose.n_iterations % 10 == 0


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_error_never_increases(seed, k):
    g = np.random.default_rng(seed)
    X = g.random((15, 12)) * (g.random((15, 12)) < 0.5)
    if not X.any():
        return
    model = fit_nmf(X, k, seed=seed, max_iter=80, tol=0)
    assert np.all(np.diff(model.errors) <= 1e-12 * max(1.0, model.errors[0]))
    assert (model.W >= 0).all() and (model.H >= 0).all()


def test_elbow_on_constructed_curve():
    curve = ErrorCurve((2, 3, 4, 5, 6), (10.0, 8.0, 3.0, 2.8, 2.7), seed=0)
    res = find_elbow(curve)
    assert res.k == 4 and res.distinct
    assert res.second_differences == pytest.approx((-3.0, 4.8, 0.1))
    assert elbow(curve) == 4


def test_elbow_ties_and_flat_curve():
    flat = ErrorCurve((1, 2, 3, 4), (5.0, 4.0, 3.0, 2.0), seed=0)
    res = find_elbow(flat)
    assert res.k == 2 and not res.distinct
    with pytest.raises(InvalidParameterError):
        find_elbow(ErrorCurve((1, 2), (1.0, 0.5), seed=0))


def test_sweep_k_bounds_and_multi_seed(rng):
    X = rng.random((20, 8))
    curve = sweep_k(X, 1, 4, seed=0, n_seeds=2)
    assert curve.ks == (1, 2, 3, 4) and curve.n_seeds == 2
    mean_k2 = np.mean([fit_nmf(X, 2, s).final_error for s in (0, 1)])
    assert curve.errors[1] == pytest.approx(mean_k2, rel=1e-12)
    with pytest.raises(InvalidParameterError):
        sweep_k(X, 2, 9)


def test_factor_and_curve_round_trip(tmp_path, rng):
    X = rng.random((12, 7))
    model = fit_nmf(X, 2, seed=3)
    write_factor_model(model, tmp_path / "f.bin")
    back = read_factor_model(tmp_path / "f.bin", X)
    np.testing.assert_array_equal(back.W, model.W)
    np.testing.assert_array_equal(back.H, model.H)
    assert back.seed == 3 and back.final_error == pytest.approx(model.final_error, rel=1e-12)
    curve = sweep_k(X, 1, 3)
    write_error_curve(curve, tmp_path / "c.tsv")
    assert read_error_curve(tmp_path / "c.tsv").errors == curve.errors


def test_sparse_nmf_estimator(rng):
    X = rng.random((25, 9))
    est = SparseNMF(n_components=3, random_state=1, max_iter=400)
    W = est.fit_transform(X)
    assert est.components_.shape == (3, 9) and W.shape == (25, 3)
    assert est.reconstruction_err_ == pytest.approx(np.linalg.norm(X - est.inverse_transform(W)))
    W2 = est.transform(X)
    assert np.linalg.norm(X - W2 @ est.components_) <= 1.05 * est.reconstruction_err_
    params = est.get_params()
    assert params == {"n_components": 3, "max_iter": 400, "tol": 1e-4, "random_state": 1}
    assert clone(est).get_params() == params
    with pytest.raises(InvalidParameterError):
        est.transform(X[:, :4])


def test_elbow_reference_curve():
    curve = ErrorCurve((1, 2, 3, 4, 5), (10.0, 4.0, 3.5, 3.4, 3.35), seed=0)
    res = find_elbow(curve)
    assert res.k == 2
    assert res.second_differences == pytest.approx((5.5, 0.4, 0.05))
