import numpy as np
import pytest
import scipy.linalg
from scipy.stats import multivariate_normal

from oracles import LinearEnv, central_gradient, central_jacobian, condensed_tail_gains, lti_dynamics, random_spd
from spatialrl import InvalidInputError
from spatialrl.lqrctl import (BackwardPassError, LinearGaussianController, QuadraticCost, QuadraticCostExpansion,
                              TaskCost, default_epsilon, expected_cost, forward, init_pd_controller,
                              kl_constrained_update, lqr_backward, quadratize_cost, rl_iterate, task_cost,
                              trajectory_kl)


def random_instance(rng, n=None, m=None, T=None):
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 3))
    T = T or int(rng.integers(2, 6))
    A = rng.standard_normal((n, n)) * 0.6 + np.eye(n)
    B = rng.standard_normal((n, m))
    c = rng.standard_normal(n) * 0.1
    Cm = np.stack([random_spd(rng, n + m) for _ in range(T)])
    cv = rng.standard_normal((T, n + m))
    dyn = lti_dynamics(A, B, c, random_spd(rng, n, 0.01), rng.standard_normal(n), random_spd(rng, n, 0.1), T)
    return dyn, QuadraticCostExpansion(Cm, cv, np.zeros(T)), (A, B, c)


@pytest.mark.parametrize("seed", range(20))
def test_backward_pass_matches_condensed_qp(seed):
    rng = np.random.default_rng(seed)
    dyn, exp_, (A, B, c) = random_instance(rng)
    ctrl = lqr_backward(dyn, exp_)
    for t0 in range(exp_.Cm.shape[0]):
        K, k, Quu = condensed_tail_gains(A, B, c, exp_.Cm, exp_.cv, t0)
        assert np.max(np.abs(ctrl.K[t0] - K)) <= 1e-8
        assert np.max(np.abs(ctrl.k[t0] - k)) <= 1e-8
        np.testing.assert_allclose(ctrl.cov[t0], np.linalg.inv(Quu), atol=1e-8)


def test_long_horizon_gain_converges_to_riccati_solution():
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.005], [0.1]])
    Q, R = np.diag([1.0, 0.1]), np.array([[0.5]])
    T = 400
    Cm = np.tile(scipy.linalg.block_diag(Q, R), (T, 1, 1))
    dyn = lti_dynamics(A, B, np.zeros(2), 1e-4 * np.eye(2), np.zeros(2), np.eye(2), T)
    ctrl = lqr_backward(dyn, QuadraticCostExpansion(Cm, np.zeros((T, 3)), np.zeros(T)))
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    K_inf = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    np.testing.assert_allclose(ctrl.K[0], K_inf, atol=1e-8)


def test_indefinite_action_curvature_is_regularised_or_rejected():
    rng = np.random.default_rng(0)
    dyn, exp_, _ = random_instance(rng, 2, 1, 3)
    Cm = exp_.Cm.copy()
    Cm[:, 2, 2] = -1e-7
    Cm[:, :2, 2] = Cm[:, 2, :2] = 0
    ctrl = lqr_backward(dyn, QuadraticCostExpansion(Cm, exp_.cv, exp_.cc))
    assert np.all(np.isfinite(ctrl.K))
    Cm[-1, 2, 2] = -1e3   # beyond the largest damping tried
    with pytest.raises(BackwardPassError):
        lqr_backward(dyn, QuadraticCostExpansion(Cm, exp_.cv, exp_.cc))


def sample_trajectories(ctrl, dyn, N, rng):
    n, m = ctrl.dims
    X = np.zeros((N, ctrl.T, n))
    U = np.zeros((N, ctrl.T, m))
    x = rng.multivariate_normal(dyn.x0_mean, dyn.x0_cov, size=N)
    for t in range(ctrl.T):
        u = x @ ctrl.K[t].T + ctrl.k[t] + rng.standard_normal((N, m)) @ ctrl.chol[t].T
        X[:, t], U[:, t] = x, u
        if t < ctrl.T - 1:
            x = x @ dyn.fx[t].T + u @ dyn.fu[t].T + dyn.fc[t] + rng.multivariate_normal(
                np.zeros(n), dyn.cov[t], size=N)
    return X, U


def random_controller(rng, T, n, m):
    return LinearGaussianController(rng.standard_normal((T, m, n)) * 0.5, rng.standard_normal((T, m)),
                                    np.stack([random_spd(rng, m, 0.5) for _ in range(T)]))


def test_forward_marginals_match_monte_carlo():
    rng = np.random.default_rng(3)
    dyn, _, _ = random_instance(rng, 2, 2, 4)
    ctrl = random_controller(rng, 4, 2, 2)
    mu, sig = forward(ctrl, dyn)
    X, U = sample_trajectories(ctrl, dyn, 200_000, rng)
    Z = np.concatenate([X, U], axis=2)
    np.testing.assert_allclose(Z.mean(0), mu, atol=0.03)
    for t in range(4):
        np.testing.assert_allclose(np.cov(Z[:, t].T), sig[t], atol=0.05 * np.abs(sig[t]).max())


def test_expected_cost_matches_monte_carlo():
    rng = np.random.default_rng(4)
    dyn, exp_, _ = random_instance(rng, 2, 1, 5)
    ctrl = random_controller(rng, 5, 2, 1)
    X, U = sample_trajectories(ctrl, dyn, 200_000, rng)
    Z = np.concatenate([X, U], axis=2)
    mc = sum(np.mean(0.5 * np.einsum("ni,ij,nj->n", Z[:, t], exp_.Cm[t], Z[:, t]) + Z[:, t] @ exp_.cv[t])
             for t in range(5))
    assert expected_cost(ctrl, dyn, exp_) == pytest.approx(mc, rel=0.01)


def test_trajectory_kl_matches_monte_carlo():
    rng = np.random.default_rng(5)
    dyn, _, _ = random_instance(rng, 2, 2, 4)
    p, q = random_controller(rng, 4, 2, 2), random_controller(rng, 4, 2, 2)
    X, U = sample_trajectories(p, dyn, 100_000, rng)
    lr = 0.0
    for t in range(4):
        for c, sign in ((p, 1), (q, -1)):
            mean = X[:, t] @ c.K[t].T + c.k[t]
            lr = lr + sign * multivariate_normal(np.zeros(2), c.cov[t]).logpdf(U[:, t] - mean)
    mc = lr.mean()
    se = lr.std() / np.sqrt(len(lr))
    kl = trajectory_kl(p, q, dyn)
    assert abs(kl - mc) < 5 * se
    assert trajectory_kl(p, p, dyn) == pytest.approx(0.0, abs=1e-10)


def kl_instance(seed):
    rng = np.random.default_rng(seed)
    n, m, T = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(3, 8))
    dyn, exp_, _ = random_instance(rng, n, m, T)
    prev = LinearGaussianController(np.zeros((T, m, n)), np.zeros((T, m)), np.tile(np.eye(m), (T, 1, 1)))
    return prev, dyn, exp_


@pytest.mark.parametrize("seed", range(20))
def test_kl_update_lands_in_band(seed):
    prev, dyn, exp_ = kl_instance(seed)
    free = lqr_backward(dyn, exp_)
    kl_free = trajectory_kl(free, prev, dyn)
    eps = 0.3 * kl_free          # strictly active
    res = kl_constrained_update(prev, dyn, exp_, eps)
    assert res.converged and res.eta > 0
    kl = trajectory_kl(res.controller, prev, dyn)
    assert 0.9 * eps <= kl <= 1.1 * eps
    assert expected_cost(res.controller, dyn, exp_) < expected_cost(prev, dyn, exp_)


@pytest.mark.parametrize("seed", range(5))
def test_huge_epsilon_reduces_to_plain_lqr(seed):
    prev, dyn, exp_ = kl_instance(seed)
    res = kl_constrained_update(prev, dyn, exp_, 1e10)
    free = lqr_backward(dyn, exp_)
    assert res.eta == 0.0
    for a, b in ((res.controller.K, free.K), (res.controller.k, free.k), (res.controller.cov, free.cov)):
        assert np.max(np.abs(a - b)) <= 1e-6


def test_kl_update_rejects_nonpositive_epsilon():
    prev, dyn, exp_ = kl_instance(0)
    with pytest.raises(InvalidInputError):
        kl_constrained_update(prev, dyn, exp_, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_task_cost_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, m = 6, 2
    cost = TaskCost(idx=[0, 1, 4], targets=rng.standard_normal(3) * 0.1, alpha=1e-2,
                    point_scale=rng.uniform(0.5, 2.0, 3))
    x, u = rng.standard_normal(n) * 0.2, rng.standard_normal(m)
    z = np.concatenate([x, u])
    f = lambda zz: task_cost(cost, zz[:n], zz[n:])[0]
    g = lambda zz: task_cost(cost, zz[:n], zz[n:])[1]
    _, grad, hess = task_cost(cost, x, u)
    fd_g = central_gradient(f, z, 1e-5)
    fd_h = central_jacobian(g, z, 1e-6)
    assert np.max(np.abs(grad - fd_g)) / np.max(np.abs(grad)) <= 1e-5
    assert np.max(np.abs(hess - fd_h)) / np.max(np.abs(hess)) <= 1e-5
    assert cost.value(x, u) == pytest.approx(task_cost(cost, x, u)[0], rel=1e-14)


def test_task_cost_switches_targets():
    cost = TaskCost.waypoints([0, 1], np.zeros(2), np.ones(2), T=10)
    np.testing.assert_array_equal(cost.target_at(4), [0, 0])
    np.testing.assert_array_equal(cost.target_at(5), [1, 1])
    with pytest.raises(InvalidInputError):
        TaskCost([0], [[0.0]], alpha=0.0)


def test_quadratize_is_exact_for_quadratic_costs():
    rng = np.random.default_rng(8)
    n, m, T = 3, 2, 4
    H = random_spd(rng, n + m)
    g = rng.standard_normal(n + m)
    cost = QuadraticCost(H, g, 0.7)
    X, U = rng.standard_normal((5, T, n)), rng.standard_normal((5, T, m))
    e = quadratize_cost(cost, X, U)
    x, u = rng.standard_normal(n), rng.standard_normal(m)
    z = np.concatenate([x, u])
    for t in range(T):
        assert e.value(t, x, u) == pytest.approx(0.5 * z @ H @ z + g @ z + 0.7, rel=1e-10)


def test_pd_controller_holds_position():
    ctrl = init_pd_controller(np.array([0.2, -0.1, 0.0, 0.0]), T=5, n_pos=2, kp=3.0, kd=1.0, noise_var=0.5)
    u = ctrl.mean_action(0, np.array([0.0, 0.0, 0.1, 0.0]))
    np.testing.assert_allclose(u, [3 * 0.2 - 0.1, 3 * -0.1])
    np.testing.assert_allclose(ctrl.cov[0], 0.5 * np.eye(2))


def test_rl_iterate_approaches_lqg_optimum():
    dt = 0.1
    A = np.array([[1, dt], [0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    T, W, x0 = 20, 1e-4 * np.eye(2), np.array([1.0, 0.0])
    S0 = 1e-6 * np.eye(2)
    H = scipy.linalg.block_diag(np.diag([100.0, 1.0]), [[1.0]])
    cost = QuadraticCost(H, np.zeros(3), 0.0)
    env = LinearEnv(A, B, W, x0, S0, T)
    ctrl = LinearGaussianController(np.zeros((T, 1, 2)), np.zeros((T, 1)), np.ones((T, 1, 1)))
    res = rl_iterate(env, ctrl, cost, N=5, iters=15, seed=0)
    true = lti_dynamics(A, B, np.zeros(2), W, x0, S0, T)
    exp_ = QuadraticCostExpansion(np.tile(H, (T, 1, 1)), np.zeros((T, 3)), np.zeros(T))
    opt = expected_cost(lqr_backward(true, exp_), true, exp_)
    got = expected_cost(res.controller, true, exp_)
    assert got <= 1.05 * opt
    assert default_epsilon(T, 1) == pytest.approx(T * 0.1)
