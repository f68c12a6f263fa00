import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from ppls.errors import DimensionMismatch, RankDeficient
from ppls.model import DataPair
from ppls.pls import fit_pls

from conftest import random_theta, sample_gaussian


def test_noiseless_subspaces(rng):
    th = random_theta(rng, p=8, q=6, r=2)
    T = rng.standard_normal((50, 2))
    data = DataPair.from_raw(T @ th.W.T, (T * th.b) @ th.C.T)
    fit = fit_pls(data, 2)
    assert np.max(scipy.linalg.subspace_angles(fit.W, th.W)) < 1e-8
    assert np.max(scipy.linalg.subspace_angles(fit.C, th.C)) < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 3))
def test_orthonormal_and_scores(seed, r):
    rng = np.random.default_rng(seed)
    data = DataPair.from_raw(rng.standard_normal((25, 6)), rng.standard_normal((25, 5)))
    fit = fit_pls(data, r)
    np.testing.assert_allclose(fit.W.T @ fit.W, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(fit.C.T @ fit.C, np.eye(r), atol=1e-10)
    np.testing.assert_allclose(fit.scoresT, data.X @ fit.W)
    np.testing.assert_allclose(fit.scoresU, data.Y @ fit.C)
    idx = np.argmax(np.abs(fit.W), axis=0)
    assert np.all(fit.W[idx, np.arange(r)] > 0)


def test_row_order_invariance(rng):
    th = random_theta(rng, p=6, q=6, r=2)
    data = sample_gaussian(rng, th, 40)
    perm = rng.permutation(40)
    a = fit_pls(data, 2)
    b = fit_pls(DataPair(data.X[perm], data.Y[perm], centered=True), 2)
    np.testing.assert_allclose(a.W, b.W, atol=1e-10)
    np.testing.assert_allclose(a.C, b.C, atol=1e-10)


def test_nipals_agrees_with_svd(rng):
    th = random_theta(rng, p=10, q=8, r=3)
    data = sample_gaussian(rng, th, 60)
    a = fit_pls(data, 3)
    b = fit_pls(data, 3, method="nipals")
    np.testing.assert_allclose(b.W[:, 0], a.W[:, 0], atol=1e-8)
    np.testing.assert_allclose(b.C[:, 0], a.C[:, 0], atol=1e-8)
    np.testing.assert_allclose(b.W.T @ b.W, np.eye(3), atol=1e-10)


def test_rank_deficient(rng):
    T = rng.standard_normal((30, 1))
    data = DataPair.from_raw(T @ rng.standard_normal((1, 5)), T @ rng.standard_normal((1, 5)))
    for method in ("svd", "nipals"):
        with pytest.raises(RankDeficient):
            fit_pls(data, 2, method=method)
    with pytest.raises(DimensionMismatch):
        fit_pls(data, 5)
