import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialrl import InvalidInputError
from spatialrl.dynfit import GmmPrior, fit_dynamics, fit_gmm, transitions


def simulate(rng, A, B, c, N, T, noise=0.01):
    n, m = B.shape
    X = np.zeros((N, T, n))
    U = rng.standard_normal((N, T, m))
    X[:, 0] = rng.standard_normal((N, n))
    for t in range(T - 1):
        X[:, t + 1] = X[:, t] @ A.T + U[:, t] @ B.T + c + noise * rng.standard_normal((N, n))
    return X, U


def system(rng, n=3, m=2):
    return rng.standard_normal((n, n)) * 0.3 + np.eye(n), rng.standard_normal((n, m)), rng.standard_normal(n) * 0.1


def test_plain_fit_matches_least_squares():
    rng = np.random.default_rng(0)
    A, B, c = system(rng)
    X, U = simulate(rng, A, B, c, N=40, T=6)
    dyn = fit_dynamics(X, U, regularization=0.0)
    for t in range(5):
        design = np.hstack([X[:, t], U[:, t], np.ones((40, 1))])
        coef, *_ = np.linalg.lstsq(design, X[:, t + 1], rcond=None)
        np.testing.assert_allclose(dyn.fx[t], coef[:3].T, atol=1e-5)
        np.testing.assert_allclose(dyn.fu[t], coef[3:5].T, atol=1e-5)
        np.testing.assert_allclose(dyn.fc[t], coef[5], atol=1e-5)
        resid = X[:, t + 1] - design @ coef
        np.testing.assert_allclose(dyn.cov[t], resid.T @ resid / 40, atol=1e-6)


def test_recovers_true_system_with_many_samples():
    rng = np.random.default_rng(1)
    A, B, c = system(rng)
    X, U = simulate(rng, A, B, c, N=2000, T=4)
    dyn = fit_dynamics(X, U)
    for t in range(3):
        np.testing.assert_allclose(dyn.fx[t], A, atol=0.01)
        np.testing.assert_allclose(dyn.fu[t], B, atol=0.01)
        np.testing.assert_allclose(dyn.cov[t], 1e-4 * np.eye(3), atol=3e-5)


def test_prior_rescues_small_sample_fit():
    rng = np.random.default_rng(2)
    A, B, c = system(rng)
    Xp, Up = simulate(rng, A, B, c, N=60, T=20)
    prior = fit_gmm(transitions(Xp, Up), K=2, seed=0)
    X, U = simulate(rng, A, B, c, N=5, T=20)
    with_prior = fit_dynamics(X, U, prior=prior)
    without = fit_dynamics(X, U, pool_neighbors=False)
    err_p = np.mean([np.abs(with_prior.fx[t] - A).max() for t in range(19)])
    err_n = np.mean([np.abs(without.fx[t] - A).max() for t in range(19)])
    assert err_p < 0.05
    assert err_p < err_n
    Xt, Ut = simulate(rng, A, B, c, N=20, T=20)
    assert with_prior.log_likelihood(Xt, Ut) > without.log_likelihood(Xt, Ut)


def test_covariances_are_positive_definite_with_tiny_data():
    rng = np.random.default_rng(3)
    A, B, c = system(rng)
    X, U = simulate(rng, A, B, c, N=2, T=10, noise=0.0)
    dyn = fit_dynamics(X, U)
    for cov in dyn.cov:
        assert np.linalg.eigvalsh(cov).min() > 0
    assert np.all(np.isfinite(dyn.fx))


def test_fit_dynamics_rejects_single_sample():
    with pytest.raises(InvalidInputError):
        fit_dynamics(np.zeros((1, 5, 2)), np.zeros((1, 5, 1)))


def gmm_datasets():
    rng = np.random.default_rng(4)
    yield rng.standard_normal((300, 2))
    yield np.vstack([rng.standard_normal((150, 3)) * 0.1 + 3, rng.standard_normal((150, 3)) * 0.5])
    # degenerate: points on a line, the covariance floor keeps things finite
    s = rng.standard_normal(200)
    yield np.stack([s, 2 * s, -s], axis=1)
    yield rng.standard_normal((400, 5)) @ rng.standard_normal((5, 5))


@pytest.mark.parametrize("K", [1, 3, 5])
def test_gmm_objective_is_monotone(K):
    for i, Z in enumerate(gmm_datasets()):
        g = fit_gmm(Z, K=K, seed=i)
        h = np.asarray(g.objective_history)
        assert np.all(np.diff(h) >= -1e-9), (i, np.diff(h).min())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_gmm_monotone_on_random_mixtures(seed, K):
    rng = np.random.default_rng(seed)
    Z = np.vstack([rng.standard_normal((60, 3)) * rng.uniform(0.05, 1) + rng.standard_normal(3) * 3
                   for _ in range(3)])
    h = np.asarray(fit_gmm(Z, K=K, seed=seed).objective_history)
    assert np.all(np.diff(h) >= -1e-9)


def test_gmm_recovers_separated_clusters():
    rng = np.random.default_rng(5)
    centers = np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]])
    Z = np.vstack([c + 0.3 * rng.standard_normal((200, 2)) for c in centers])
    g = fit_gmm(Z, K=3, seed=0)
    order = [int(np.argmin(np.linalg.norm(g.means - c, axis=1))) for c in centers]
    assert sorted(order) == [0, 1, 2]
    np.testing.assert_allclose(g.means[order], centers, atol=0.1)
    np.testing.assert_allclose(g.weights, 1 / 3, atol=0.02)
    np.testing.assert_allclose(np.exp(g.log_resp(Z)).sum(axis=1), 1.0)


def test_gmm_is_deterministic_given_seed():
    Z = next(gmm_datasets())
    a, b = fit_gmm(Z, K=3, seed=9), fit_gmm(Z, K=3, seed=9)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.covs, b.covs)


def test_gmm_needs_enough_points():
    with pytest.raises(InvalidInputError):
        fit_gmm(np.zeros((10, 3)), K=3)


def test_single_component_moments_are_that_component():
    rng = np.random.default_rng(6)
    mu, cov = rng.standard_normal(2), np.array([[2.0, 0.3], [0.3, 1.0]])
    g = GmmPrior(np.array([1.0]), mu[None], cov[None])
    m0, s0 = g.moments(rng.standard_normal((7, 2)))
    np.testing.assert_allclose(m0, mu)
    np.testing.assert_allclose(s0, cov)
