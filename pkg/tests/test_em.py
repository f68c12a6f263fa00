import dataclasses

import numpy as np
import pytest
import scipy.linalg
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from ppls.em import (
    FitConfig,
    _structured_pass,
    _dense_pass,
    e_step,
    fit_ppls,
    initialize_theta,
    m_step,
    orthonormal_update,
    q_function,
)
from ppls.errors import DimensionMismatch, NegativeVariance, RankDeficient
from ppls.model import DataPair, Theta, log_likelihood, validate_theta
from ppls.simulation import ScenarioConfig, align_estimates, generate_data, make_true_model

from conftest import conditioning_oracle, random_theta, sample_gaussian


def assert_rel_close(a, b, rel):
    a, b = np.asarray(a), np.asarray(b)
    assert np.max(np.abs(a - b)) <= rel * max(np.max(np.abs(b)), 1e-300)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_e_step_matches_conditioning_oracle(seed):
    rng = np.random.default_rng(seed)
    th = random_theta(rng, p=5, q=5, r=2)
    data = sample_gaussian(rng, th, 20)
    got = e_step(data, th)
    want = conditioning_oracle(data, th)
    for name, value in want.items():
        assert_rel_close(getattr(got, name), value, 1e-8)


def test_e_step_decouples_when_b_vanishes(rng):
    th = random_theta(rng, p=5, q=4, r=2).replace(b=[1e-300, 1e-300])
    data = sample_gaussian(rng, th.replace(b=[1.0, 0.5]), 30)
    m = e_step(data, th)
    Y2 = data.Y + rng.standard_normal(data.Y.shape)
    m2 = e_step(DataPair(data.X, Y2 - Y2.mean(0), centered=True), th)
    np.testing.assert_allclose(m.muT, m2.muT, atol=1e-12)  # muT ignores Y
    X2 = data.X + rng.standard_normal(data.X.shape)
    m3 = e_step(DataPair(X2 - X2.mean(0), data.Y, centered=True), th)
    np.testing.assert_allclose(m.muU, m3.muU, atol=1e-12)  # muU ignores X


def test_e_step_conditional_mean_is_linear(rng):
    th = random_theta(rng, p=5, q=5, r=2)
    data = sample_gaussian(rng, th, 25)
    # every variance x4 and data x2: the whole (x, y, t, u) vector doubles
    th4 = th.replace(sigma_t2=4 * th.sigma_t2, sigma_e2=4 * th.sigma_e2,
                     sigma_f2=4 * th.sigma_f2, sigma_h2=4 * th.sigma_h2)
    m1 = e_step(data, th)
    m2 = e_step(DataPair(2 * data.X, 2 * data.Y, centered=True), th4)
    np.testing.assert_allclose(m2.muT, 2 * m1.muT, rtol=1e-10)


def test_e_step_invariants(study_data, study_fit):
    m = e_step(study_data[1], study_fit.theta)
    for M in (m.Ctt, m.Cuu):
        np.testing.assert_allclose(M, M.T, atol=1e-10)
        assert np.linalg.eigvalsh(M).min() >= -1e-10
    assert min(m.expEE, m.expFF, m.expHH) >= 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 3))
def test_structured_pass_matches_dense(seed, r):
    rng = np.random.default_rng(seed)
    th = random_theta(rng, p=6, q=5, r=r)
    data = sample_gaussian(rng, th, 15)
    S = data.cross_products()
    ll_s, ms = _structured_pass(S, data.N, data.p, th)
    ll_d, md = _dense_pass(S, data.N, data.p, th)
    assert ll_s == pytest.approx(ll_d, rel=1e-11)
    assert ll_d == pytest.approx(log_likelihood(data, th), rel=1e-12)
    for f in ("Ctt", "Cuu", "Cut", "XtMuT", "YtMuU", "expEE", "expFF", "expHH", "cond_cov"):
        np.testing.assert_allclose(getattr(ms, f), getattr(md, f), rtol=1e-9, atol=1e-11)


# -- M-step -----------------------------------------------------------------------


@pytest.mark.parametrize("method", ["symmetric", "cholesky", "eigen"])
def test_orthonormal_update(rng, method):
    A = rng.standard_normal((12, 3))
    W = orthonormal_update(A, method)
    np.testing.assert_allclose(W.T @ W, np.eye(3), atol=1e-10)
    # L = A' W satisfies L L' = A'A
    L = A.T @ W
    np.testing.assert_allclose(L @ L.T, A.T @ A, rtol=1e-10)


def test_symmetric_update_is_the_constrained_maximizer(rng):
    A = rng.standard_normal((10, 3))
    W = orthonormal_update(A, "symmetric")
    best = np.sum(A * W)
    for method in ("cholesky", "eigen"):
        assert np.sum(A * orthonormal_update(A, method)) <= best + 1e-12
    for _ in range(200):
        Q = np.linalg.qr(rng.standard_normal((10, 3)))[0]
        assert np.sum(A * Q) <= best + 1e-12


@pytest.mark.parametrize("b_update", ["diagonal", "hadamard"])
def test_b_update_example(study_data, study_fit, b_update):
    m = dataclasses.replace(study_fit.final_moments, Ctt=np.diag([4.0, 1.0, 1.0]), Cut=np.diag([2.0, 1.0, 1.0]))
    # the replaced blocks are inconsistent with the data, so the noise
    # updates may go negative; only b is of interest here
    with pytest.warns(RuntimeWarning):
        th = m_step(study_data[1], m, FitConfig(b_update=b_update), floor_variances=True)
    np.testing.assert_allclose(th.b[:2], [0.5, 1.0])


@pytest.mark.parametrize("method", ["symmetric", "cholesky", "eigen"])
def test_m_step_keeps_orthonormality(study_data, method):
    data = study_data[1]
    th = initialize_theta(data, 3)
    for _ in range(5):
        th = m_step(data, e_step(data, th), FitConfig(orthogonalization=method))
        np.testing.assert_allclose(th.W.T @ th.W, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(th.C.T @ th.C, np.eye(3), atol=1e-10)


def test_m_step_maximizes_expected_complete_loglik(study_data):
    data = study_data[1]
    rng = np.random.default_rng(5)
    th0 = initialize_theta(data, 3)
    m = e_step(data, th0)
    best = m_step(data, m)
    q_best = q_function(m, best)
    for _ in range(50):
        s = rng.uniform(0.001, 0.2)
        W = orthonormal_update(best.W + s * rng.standard_normal(best.W.shape))
        C = orthonormal_update(best.C + s * rng.standard_normal(best.C.shape))
        other = Theta(
            W=W, C=C,
            b=best.b * np.exp(s * rng.standard_normal(3)),
            sigma_t2=best.sigma_t2 * np.exp(s * rng.standard_normal(3)),
            sigma_e2=best.sigma_e2 * np.exp(s * rng.standard_normal()),
            sigma_f2=best.sigma_f2 * np.exp(s * rng.standard_normal()),
            sigma_h2=best.sigma_h2 * np.exp(s * rng.standard_normal()),
        )
        assert q_function(m, other) < q_best


def test_m_step_negative_variance(study_data, study_fit):
    bad = dataclasses.replace(study_fit.final_moments, trXX=0.0)
    with pytest.raises(NegativeVariance):
        m_step(study_data[1], bad)
    with pytest.warns(RuntimeWarning):
        th = m_step(study_data[1], bad, floor_variances=True)
    assert th.sigma_e2 == 1e-12


def test_m_step_fixed_point(study_data):
    data = study_data[1]
    fit = fit_ppls(data, 3, FitConfig(tol=1e-10))
    assert fit.converged
    nxt = m_step(data, e_step(data, fit.theta))
    a = align_estimates(nxt, fit.theta)
    th = fit.theta
    for new, old in ((a.W, th.W), (a.C, th.C), (a.b, th.b), (a.sigma_t2, th.sigma_t2),
                     (nxt.sigma_e2, th.sigma_e2), (nxt.sigma_f2, th.sigma_f2), (nxt.sigma_h2, th.sigma_h2)):
        assert np.max(np.abs(np.asarray(new) - old)) <= 1e-6 * max(np.max(np.abs(old)), 1e-3)


# -- initialization -----------------------------------------------------------------


def _principal_angles(A, B):
    return scipy.linalg.subspace_angles(A, B)


def test_initialize_noiseless_subspace(rng):
    th = random_theta(rng, p=8, q=7, r=2)
    T = rng.standard_normal((40, 2)) * np.sqrt(th.sigma_t2)
    X, Y = T @ th.W.T, (T * th.b) @ th.C.T
    init = initialize_theta(DataPair.from_raw(X, Y), 2)
    assert np.max(_principal_angles(init.W, th.W)) < 1e-6
    assert np.max(_principal_angles(init.C, th.C)) < 1e-6


def test_initialize_deterministic_and_valid(study_data):
    data = study_data[1]
    a, b = initialize_theta(data, 3), initialize_theta(data, 3)
    assert a.allclose(b, atol=0)
    assert validate_theta(a) == []
    c = initialize_theta(data, 3, seed=4)
    assert validate_theta(c) == []
    assert not c.allclose(a, atol=1e-6)


def test_initialize_rank_deficient(rng):
    T = rng.standard_normal((30, 1))
    X = T @ rng.standard_normal((1, 6))
    Y = T @ rng.standard_normal((1, 6))
    with pytest.raises(RankDeficient):
        initialize_theta(DataPair.from_raw(X, Y), 2)
    with pytest.raises(DimensionMismatch):
        initialize_theta(DataPair.from_raw(X, Y), 6)


# -- driver ----------------------------------------------------------------------------


def test_fit_requires_centered_data(rng):
    X, Y = rng.standard_normal((20, 4)) + 3, rng.standard_normal((20, 4))
    with pytest.raises(ValueError):
        fit_ppls(DataPair(X, Y), 1)


def test_fit_recovers_truth():
    model = make_true_model(ScenarioConfig(N=500, noise_level=0.1))
    data, _ = generate_data(model, 500, 11)
    fit = fit_ppls(data, 3)
    a = align_estimates(fit.theta, model)
    assert fit.converged
    assert np.sqrt(np.mean((a.W - model.theta.W) ** 2)) < 0.05
    assert np.sqrt(np.mean((a.C - model.theta.C) ** 2)) < 0.05


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_fit_trace_is_monotone(seed):
    rng = np.random.default_rng(seed)
    th = random_theta(rng, p=6, q=6, r=2)
    fit = fit_ppls(sample_gaussian(rng, th, 30), 2)
    tr = fit.loglik_trace
    assert np.all(np.diff(tr) >= -1e-8 * np.abs(tr[:-1]))
    assert validate_theta(fit.theta) == []


def test_fit_dense_and_structured_agree(study_data, study_fit):
    dense = fit_ppls(study_data[1], 3, FitConfig(structured=False))
    assert dense.iterations == study_fit.iterations
    assert dense.theta.allclose(study_fit.theta, atol=1e-8)
    assert dense.loglik == pytest.approx(study_fit.loglik, rel=1e-12)


def test_fit_is_deterministic(study_data, study_fit):
    again = fit_ppls(study_data[1], 3)
    assert again.theta.allclose(study_fit.theta, atol=0)
    assert np.array_equal(again.loglik_trace, study_fit.loglik_trace)


def test_fit_max_iter_flag(study_data):
    fit = fit_ppls(study_data[1], 3, FitConfig(max_iter=3))
    assert not fit.converged and fit.iterations == 3 and len(fit.loglik_trace) == 4


def test_fit_is_permutation_equivariant(study_data, study_fit):
    data = study_data[1]
    perm = np.random.default_rng(2).permutation(data.p)
    fit = fit_ppls(DataPair(data.X[:, perm], data.Y, centered=True), 3)
    np.testing.assert_allclose(fit.theta.W, study_fit.theta.W[perm], atol=1e-7)
    np.testing.assert_allclose(fit.theta.C, study_fit.theta.C, atol=1e-7)


def test_fit_reaches_the_likelihood_maximum(rng):
    """A general-purpose optimizer started at the EM fit finds nothing better."""
    th = random_theta(rng, p=5, q=5, r=2)
    data = sample_gaussian(rng, th, 100)
    fit = fit_ppls(data, 2, FitConfig(tol=1e-10))
    p, q, r = 5, 5, 2

    def unpack(v):
        W = np.linalg.qr(fit.theta.W + v[:p * r].reshape(p, r))[0]
        C = np.linalg.qr(fit.theta.C + v[p * r:(p + q) * r].reshape(q, r))[0]
        rest = np.exp(v[(p + q) * r:])
        return Theta(W=W, C=C, b=rest[:r], sigma_t2=rest[r:2 * r],
                     sigma_e2=rest[-3], sigma_f2=rest[-2], sigma_h2=rest[-1])

    t = fit.theta
    v0 = np.r_[np.zeros((p + q) * r), np.log(np.r_[t.b, t.sigma_t2, t.sigma_e2, t.sigma_f2, t.sigma_h2])]
    res = scipy.optimize.minimize(lambda v: -log_likelihood(data, unpack(v)), v0, method="BFGS",
                                  options={"gtol": 1e-8, "maxiter": 5000})
    assert -res.fun <= fit.loglik + 1e-6
