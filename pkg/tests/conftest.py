import numpy as np
import pytest
from scipy.stats import ortho_group

from ppls.model import DataPair, Theta
from ppls.simulation import ScenarioConfig, generate_data, make_true_model


def random_orthonormal(rng, n, r):
    return ortho_group.rvs(n, random_state=rng)[:, :r]


def random_theta(rng, p=5, q=5, r=2, canonical=True):
    """A valid Theta with well separated, decreasing sigma_t2 * b."""
    strength = np.sort(rng.uniform(0.5, 3.0, r))[::-1] * np.linspace(1.0, 0.4, r)
    sigma_t2 = rng.uniform(0.5, 2.0, r)
    theta = Theta(
        W=random_orthonormal(rng, p, r),
        C=random_orthonormal(rng, q, r),
        b=strength / sigma_t2,
        sigma_t2=sigma_t2,
        sigma_e2=rng.uniform(0.1, 1.0),
        sigma_f2=rng.uniform(0.1, 1.0),
        sigma_h2=rng.uniform(0.1, 1.0),
    )
    if canonical:
        from ppls.model import canonicalize_theta

        theta = canonicalize_theta(theta).theta
    return theta


def sample_gaussian(rng, theta, N):
    """Draw N rows straight from the latent model, centered."""
    p, q, r = theta.dims
    T = rng.standard_normal((N, r)) * np.sqrt(theta.sigma_t2)
    U = T * theta.b + rng.standard_normal((N, r)) * np.sqrt(theta.sigma_h2)
    X = T @ theta.W.T + rng.standard_normal((N, p)) * np.sqrt(theta.sigma_e2)
    Y = U @ theta.C.T + rng.standard_normal((N, q)) * np.sqrt(theta.sigma_f2)
    return DataPair.from_raw(X, Y)


def conditioning_oracle(data, theta):
    """Row-by-row Gaussian conditioning on the full (x, y, t, u) covariance.

    The covariance is built from the source representation
    (x, y, t, u) = A (t, h, e, f) with independent sources.
    """
    p, q, r = theta.dims
    W, C, B = theta.W, theta.C, np.diag(theta.b)
    A = np.zeros((p + q + 2 * r, 2 * r + p + q))
    A[:p, :r], A[:p, 2 * r:2 * r + p] = W, np.eye(p)
    A[p:p + q, :r], A[p:p + q, r:2 * r], A[p:p + q, 2 * r + p:] = C @ B, C, np.eye(q)
    A[p + q:p + q + r, :r] = np.eye(r)
    A[p + q + r:, :r], A[p + q + r:, r:2 * r] = B, np.eye(r)
    src = np.r_[theta.sigma_t2, np.full(r, theta.sigma_h2), np.full(p, theta.sigma_e2), np.full(q, theta.sigma_f2)]
    full = (A * src) @ A.T
    d = p + q
    Szz, Szl, Sll = full[:d, :d], full[:d, d:], full[d:, d:]
    V = Sll - Szl.T @ np.linalg.solve(Szz, Szl)
    out = {k: 0.0 for k in ("Ctt", "Cuu", "Cut", "expEE", "expFF", "expHH")}
    muT, muU = [], []
    for z in data.Z:
        m = Szl.T @ np.linalg.solve(Szz, z)
        mt, mu = m[:r], m[r:]
        Vtt, Vuu, Vut = V[:r, :r], V[r:, r:], V[r:, :r]
        muT.append(mt)
        muU.append(mu)
        out["Ctt"] = out["Ctt"] + Vtt + np.outer(mt, mt)
        out["Cuu"] = out["Cuu"] + Vuu + np.outer(mu, mu)
        out["Cut"] = out["Cut"] + Vut + np.outer(mu, mt)
        x, y = z[:p], z[p:]
        out["expEE"] += np.sum((x - W @ mt) ** 2) + np.trace(W @ Vtt @ W.T)
        out["expFF"] += np.sum((y - C @ mu) ** 2) + np.trace(C @ Vuu @ C.T)
        out["expHH"] += np.sum((mu - B @ mt) ** 2) + np.trace(Vuu - B @ Vut - Vut.T @ B + B @ Vtt @ B)
    out["muT"], out["muU"] = np.array(muT), np.array(muU)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def study_data():
    """Standard 20 x 20, r = 3, N = 200, alpha = 0.1 normal data set."""
    model = make_true_model(ScenarioConfig(N=200, noise_level=0.1))
    data, latents = generate_data(model, 200, 7)
    return model, data, latents


@pytest.fixture(scope="session")
def study_fit(study_data):
    from ppls.em import fit_ppls

    return fit_ppls(study_data[1], 3)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
