"""Trajectory-centric RL with time-varying linear-Gaussian controllers.

Conventions: a trajectory has ``T`` states ``x_0..x_{T-1}`` and ``T`` actions;
dynamics are defined for ``t < T-1``. Cost expansions are kept in absolute
coordinates, ``l(z) ~ 1/2 z' Cm z + z' cv + cc`` with ``z = [x; u]``, which makes
averaging expansions taken at different samples well defined.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from . import InvalidInputError
from .dynfit import GmmPrior, TimeVaryingLinearDynamics, fit_dynamics, fit_gmm, transitions

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# controllers


@dataclass
class LinearGaussianController:
    """``p(u_t | x_t) = N(K_t x_t + k_t, C_t)``."""

    K: np.ndarray   # T x m x n
    k: np.ndarray   # T x m
    cov: np.ndarray  # T x m x m

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        self.chol = np.linalg.cholesky(self.cov)

    @property
    def T(self) -> int:
        return self.K.shape[0]

    @property
    def dims(self) -> tuple[int, int]:
        """(state dim, action dim)."""
        return self.K.shape[2], self.K.shape[1]

    def mean_action(self, t: int, x) -> np.ndarray:
        return self.K[t] @ x + self.k[t]

    def act(self, t: int, x, noise=None) -> np.ndarray:
        """Sample an action; ``noise`` is a standard-normal m-vector (None for the mean)."""
        u = self.mean_action(t, x)
        if noise is not None:
            u = u + self.chol[t] @ noise
        return u

    def inv_cov(self) -> np.ndarray:
        return np.linalg.inv(self.cov)

    def copy(self) -> "LinearGaussianController":
        return LinearGaussianController(self.K.copy(), self.k.copy(), self.cov.copy())


def init_pd_controller(x_init, T: int, n_pos: int, kp: float = 2.0, kd: float = 2.0,
                       noise_var: float = 1.0, n_state: int | None = None) -> LinearGaussianController:
    """Low-gain PD controller holding the first ``n_pos`` state entries at ``x_init``.

    The state is assumed to start with positions followed by their velocities
    (``x[n_pos:2*n_pos]``); remaining entries get zero gain.
    """
    x_init = np.asarray(x_init, dtype=float)
    n = n_state or len(x_init)
    m = n_pos
    K = np.zeros((T, m, n))
    K[:, :, :n_pos] = -kp * np.eye(n_pos)
    K[:, :, n_pos:2 * n_pos] = -kd * np.eye(n_pos)
    target = np.zeros(n)
    target[:n_pos] = x_init[:n_pos]
    k = -(K @ target)
    cov = np.tile(noise_var * np.eye(m), (T, 1, 1))
    return LinearGaussianController(K, k, cov)


# ---------------------------------------------------------------------------
# costs


class Cost(Protocol):
    def derivatives(self, X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values (T,), gradients (T, n+m), Hessians (T, n+m, n+m) along one trajectory."""


@dataclass
class TaskCost:
    """``w_l2 d^2 + w_log log(d^2 + alpha) + w_u |u|^2``.

    ``d`` is the Euclidean distance between ``x[idx]`` and the active target.
    ``targets`` holds one row per phase; phase ``i`` starts at ``switch_times[i]``.
    """

    idx: np.ndarray
    targets: np.ndarray
    switch_times: tuple[int, ...] = (0,)
    w_l2: float = 1e-3
    w_log: float = 1.0
    w_u: float = 1e-2
    alpha: float = 1e-5
    point_scale: np.ndarray | None = None

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=int)
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if self.alpha <= 0 or min(self.w_l2, self.w_log, self.w_u) < 0:
            raise InvalidInputError("cost weights must be nonnegative and alpha > 0")
        if len(self.switch_times) != len(self.targets):
            raise InvalidInputError("one switch time per target row required")
        if self.point_scale is None:
            self.point_scale = np.ones(len(self.idx))
        self.point_scale = np.asarray(self.point_scale, dtype=float)

    @classmethod
    def waypoints(cls, idx, first, second, T: int, **kw) -> "TaskCost":
        return cls(idx, np.stack([first, second]), (0, T // 2), **kw)

    def target_at(self, t: int) -> np.ndarray:
        i = int(np.searchsorted(np.asarray(self.switch_times), t, side="right")) - 1
        return self.targets[max(i, 0)]

    def evaluate(self, x, u, t: int = 0) -> tuple[float, np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        n, m = len(x), len(u)
        s = self.point_scale
        r = s * (x[self.idx] - self.target_at(t))
        d2 = float(r @ r)
        inv = 1.0 / (d2 + self.alpha)
        value = self.w_l2 * d2 + self.w_log * np.log(d2 + self.alpha) + self.w_u * float(u @ u)
        grad = np.zeros(n + m)
        grad[self.idx] = 2.0 * (self.w_l2 + self.w_log * inv) * r * s
        grad[n:] = 2.0 * self.w_u * u
        hess = np.zeros((n + m, n + m))
        H = 2.0 * (self.w_l2 + self.w_log * inv) * np.eye(len(r)) - 4.0 * self.w_log * inv ** 2 * np.outer(r, r)
        hess[np.ix_(self.idx, self.idx)] = H * np.outer(s, s)
        hess[n:, n:] = 2.0 * self.w_u * np.eye(m)
        return float(value), grad, hess

    def value(self, x, u, t: int = 0) -> float:
        x = np.asarray(x, dtype=float)
        r = self.point_scale * (x[self.idx] - self.target_at(t))
        d2 = float(r @ r)
        return float(self.w_l2 * d2 + self.w_log * np.log(d2 + self.alpha) + self.w_u * np.sum(np.square(u)))

    def derivatives(self, X, U):
        out = [self.evaluate(X[t], U[t], t) for t in range(len(X))]
        return (np.array([o[0] for o in out]), np.stack([o[1] for o in out]), np.stack([o[2] for o in out]))


def task_cost(cost: TaskCost, x, u, t: int = 0):
    """Value, gradient and Hessian of the task cost at ``(x, u)``."""
    return cost.evaluate(x, u, t)


@dataclass
class QuadraticCost:
    """``1/2 z' H z + z' g + c`` per timestep (time-invariant unless arrays are T-stacked)."""

    H: np.ndarray
    g: np.ndarray
    c: float = 0.0

    def _at(self, t):
        H = self.H[t] if self.H.ndim == 3 else self.H
        g = self.g[t] if self.g.ndim == 2 else self.g
        return H, g

    def evaluate(self, x, u, t: int = 0):
        z = np.concatenate([x, u])
        H, g = self._at(t)
        return float(0.5 * z @ H @ z + g @ z + self.c), H @ z + g, H.copy()

    def derivatives(self, X, U):
        out = [self.evaluate(X[t], U[t], t) for t in range(len(X))]
        return (np.array([o[0] for o in out]), np.stack([o[1] for o in out]), np.stack([o[2] for o in out]))


@dataclass
class QuadraticCostExpansion:
    Cm: np.ndarray  # T x (n+m) x (n+m)
    cv: np.ndarray  # T x (n+m)
    cc: np.ndarray  # T

    def value(self, t, x, u) -> float:
        z = np.concatenate([x, u])
        return float(0.5 * z @ self.Cm[t] @ z + self.cv[t] @ z + self.cc[t])


def trajectory_costs(cost, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Total cost of each sample trajectory (N,)."""
    return np.array([np.sum(cost.derivatives(X[i], U[i])[0]) for i in range(len(X))])


def quadratize_cost(cost, X: np.ndarray, U: np.ndarray, u_floor: float = 1e-6,
                    x_floor: float | None = None) -> QuadraticCostExpansion:
    """Average the second-order expansions of ``cost`` taken at each sample.

    Each expansion is rewritten in absolute coordinates before averaging, so the
    average is the same whatever point it is re-centred on (the sample mean is
    the natural choice). The action block is eigenvalue-floored at ``u_floor``.

    With ``x_floor`` set, each sample's state Hessian block is also floored
    before averaging. The log term of :class:`TaskCost` is concave along the
    radial direction away from the target, and an indefinite state block lets
    the backward pass drive trajectories away from it.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.ndim == 2:
        X, U = X[None], U[None]
    N, T, n = X.shape
    m = U.shape[2]
    Cm = np.zeros((T, n + m, n + m))
    cv = np.zeros((T, n + m))
    cc = np.zeros(T)
    for i in range(N):
        vals, grads, hess = cost.derivatives(X[i], U[i])
        if x_floor is not None:
            w, V = np.linalg.eigh(0.5 * (hess[:, :n, :n] + np.swapaxes(hess[:, :n, :n], 1, 2)))
            hess = hess.copy()
            hess[:, :n, :n] = np.einsum("tij,tj,tkj->tik", V, np.maximum(w, x_floor), V)
        Z = np.concatenate([X[i], U[i]], axis=1)
        Hz = np.einsum("tij,tj->ti", hess, Z)
        Cm += hess
        cv += grads - Hz
        cc += vals - np.einsum("ti,ti->t", grads, Z) + 0.5 * np.einsum("ti,ti->t", Z, Hz)
    Cm /= N
    cv /= N
    cc /= N
    Cm = 0.5 * (Cm + np.swapaxes(Cm, 1, 2))
    for t in range(T):
        w, V = np.linalg.eigh(Cm[t, n:, n:])
        if w.min() < u_floor:
            Cm[t, n:, n:] = (V * np.maximum(w, u_floor)) @ V.T
    return QuadraticCostExpansion(Cm, cv, cc)


# ---------------------------------------------------------------------------
# LQR and trajectory distributions


class BackwardPassError(np.linalg.LinAlgError):
    pass


def lqr_backward(dyn: TimeVaryingLinearDynamics, expansion: QuadraticCostExpansion,
                 mu_init: float = 1e-6, mu_max: float = 1e2) -> LinearGaussianController:
    """Riccati recursion on the Q-function; returns the maximum-entropy controller.

    ``K_t = -Quu^-1 Qux``, ``k_t = -Quu^-1 qu``, ``C_t = Quu^-1``. A non-PD
    ``Quu`` is regularised by adding ``mu I`` with ``mu`` doubling from
    ``mu_init``; past ``mu_max`` the pass fails.
    """
    Cm, cv = expansion.Cm, expansion.cv
    T = Cm.shape[0]
    n = dyn.fx.shape[1]
    m = dyn.fu.shape[2]
    ix, iu = slice(0, n), slice(n, n + m)
    K = np.zeros((T, m, n))
    k = np.zeros((T, m))
    cov = np.zeros((T, m, m))
    Vxx = np.zeros((n, n))
    Vx = np.zeros(n)
    for t in range(T - 1, -1, -1):
        Qtt = Cm[t].copy()
        Qt = cv[t].copy()
        if t < T - 1:
            Fm = np.concatenate([dyn.fx[t], dyn.fu[t]], axis=1)
            Qtt += Fm.T @ Vxx @ Fm
            Qt += Fm.T @ (Vx + Vxx @ dyn.fc[t])
        Qtt = 0.5 * (Qtt + Qtt.T)
        Quu = Qtt[iu, iu]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            mu = mu_init
            while True:
                try:
                    L = np.linalg.cholesky(Quu + mu * np.eye(m))
                    break
                except np.linalg.LinAlgError:
                    mu *= 2.0
                    if mu > mu_max:
                        raise BackwardPassError(f"Quu not positive definite at t={t}") from None
        inv_L = np.linalg.inv(L)
        Quu_inv = inv_L.T @ inv_L
        K[t] = -Quu_inv @ Qtt[iu, ix]
        k[t] = -Quu_inv @ Qt[iu]
        cov[t] = 0.5 * (Quu_inv + Quu_inv.T)
        Vxx = Qtt[ix, ix] + Qtt[ix, iu] @ K[t]
        Vx = Qt[ix] + Qtt[ix, iu] @ k[t]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return LinearGaussianController(K, k, cov)


def forward(ctrl: LinearGaussianController, dyn: TimeVaryingLinearDynamics,
            include_noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian marginals of ``[x_t; u_t]`` under controller and linear dynamics.

    Returns means (T x (n+m)) and covariances (T x (n+m) x (n+m)).
    """
    T = ctrl.T
    n, m = ctrl.dims
    mu = np.zeros((T, n + m))
    sig = np.zeros((T, n + m, n + m))
    mx, Sx = dyn.x0_mean.copy(), dyn.x0_cov.copy()
    for t in range(T):
        K = ctrl.K[t]
        mu[t, :n] = mx
        mu[t, n:] = K @ mx + ctrl.k[t]
        sig[t, :n, :n] = Sx
        sig[t, :n, n:] = Sx @ K.T
        sig[t, n:, :n] = K @ Sx
        sig[t, n:, n:] = K @ Sx @ K.T + (ctrl.cov[t] if include_noise else 0.0)
        if t < T - 1:
            Fm = np.concatenate([dyn.fx[t], dyn.fu[t]], axis=1)
            mx = Fm @ mu[t] + dyn.fc[t]
            Sx = Fm @ sig[t] @ Fm.T + (dyn.cov[t] if include_noise else 0.0)
            Sx = 0.5 * (Sx + Sx.T)
    return mu, sig


def expected_cost(ctrl: LinearGaussianController, dyn: TimeVaryingLinearDynamics,
                  expansion: QuadraticCostExpansion, include_noise: bool = True) -> float:
    """Exact expectation of the quadratic cost under the linear-Gaussian trajectory."""
    mu, sig = forward(ctrl, dyn, include_noise)
    total = 0.0
    for t in range(ctrl.T):
        total += 0.5 * (mu[t] @ expansion.Cm[t] @ mu[t] + np.trace(expansion.Cm[t] @ sig[t]))
        total += expansion.cv[t] @ mu[t] + expansion.cc[t]
    return float(total)


def trajectory_kl(p: LinearGaussianController, pbar: LinearGaussianController,
                  dyn: TimeVaryingLinearDynamics) -> float:
    """``KL(p(tau) || pbar(tau))`` under shared dynamics, in closed form.

    Dynamics terms cancel, leaving ``sum_t E_{p(x_t)} KL(p(u|x) || pbar(u|x))``
    with state marginals propagated under ``p``.
    """
    if p.T != pbar.T:
        raise InvalidInputError("controllers must share the horizon")
    n, m = p.dims
    mu, sig = forward(p, dyn)
    total = 0.0
    for t in range(p.T):
        Lp = np.linalg.cholesky(p.cov[t])
        Lq = np.linalg.cholesky(pbar.cov[t])
        inv_q = np.linalg.inv(pbar.cov[t])
        dK = p.K[t] - pbar.K[t]
        dk = p.k[t] - pbar.k[t]
        mx, Sx = mu[t, :n], sig[t, :n, :n]
        dmean = dK @ mx + dk
        kl = 0.5 * (np.trace(inv_q @ p.cov[t]) - m
                    + 2 * np.sum(np.log(np.diag(Lq))) - 2 * np.sum(np.log(np.diag(Lp)))
                    + dmean @ inv_q @ dmean + np.trace(dK.T @ inv_q @ dK @ Sx))
        total += kl
    return float(max(total, 0.0))


def _surrogate(expansion: QuadraticCostExpansion, prev: LinearGaussianController, eta: float,
               ) -> QuadraticCostExpansion:
    """Expansion of ``(l + eta * (-log pbar(u|x))) / (1 + eta)``."""
    T, nm, _ = expansion.Cm.shape
    n, m = prev.dims
    ipc = prev.inv_cov()
    Cm = expansion.Cm / (1.0 + eta)
    cv = expansion.cv / (1.0 + eta)
    w = eta / (1.0 + eta)
    for t in range(T):
        K, k, P = prev.K[t], prev.k[t], ipc[t]
        block = np.block([[K.T @ P @ K, -K.T @ P], [-P @ K, P]])
        Cm[t] = Cm[t] + w * block
        cv[t] = cv[t] + w * np.concatenate([K.T @ P @ k, -P @ k])
    return QuadraticCostExpansion(Cm, cv, expansion.cc / (1.0 + eta))


@dataclass
class KLUpdateResult:
    controller: LinearGaussianController
    eta: float
    kl: float
    converged: bool


def kl_constrained_update(prev: LinearGaussianController, dyn: TimeVaryingLinearDynamics,
                          expansion: QuadraticCostExpansion, epsilon: float,
                          eta_init: float = 1.0, max_iter: int = 50,
                          eta_min: float = 1e-8, eta_max: float = 1e16) -> KLUpdateResult:
    """Minimise expected cost subject to ``KL(p || prev) <= epsilon``.

    Dual search over ``eta`` by bracketing and bisection on ``log eta``. Accepts
    ``KL in [0.9 eps, 1.1 eps]``, or the unconstrained solution when it already
    satisfies the bound.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")

    def solve(eta):
        try:
            ctrl = lqr_backward(dyn, _surrogate(expansion, prev, eta))
        except np.linalg.LinAlgError:
            return None, np.inf
        return ctrl, trajectory_kl(ctrl, prev, dyn)

    ctrl0, kl0 = solve(0.0)
    if ctrl0 is not None and kl0 <= epsilon:
        return KLUpdateResult(ctrl0, 0.0, kl0, True)

    lo, hi = np.log(eta_min), np.log(eta_max)   # KL(lo) too large, KL(hi) small
    best = None
    log_eta = np.log(eta_init)
    lo_ok = False
    hi_ok = False
    for _ in range(max_iter):
        eta = float(np.exp(log_eta))
        ctrl, kl = solve(eta)
        if ctrl is not None and 0.9 * epsilon <= kl <= 1.1 * epsilon:
            return KLUpdateResult(ctrl, eta, kl, True)
        if ctrl is None or kl > 1.1 * epsilon:
            lo, lo_ok = log_eta, True
        else:
            hi, hi_ok = log_eta, True
            best = (ctrl, eta, kl)
        if lo_ok and hi_ok:
            log_eta = 0.5 * (lo + hi)
        elif lo_ok:
            log_eta = min(log_eta + np.log(10.0), np.log(eta_max))
        else:
            log_eta = max(log_eta - np.log(10.0), np.log(eta_min))
    log.warning("KL dual search did not bracket epsilon=%g; returning the feasible side", epsilon)
    if best is None:
        ctrl, kl = solve(eta_max)
        if ctrl is None:
            return KLUpdateResult(prev.copy(), eta_max, 0.0, False)
        best = (ctrl, eta_max, kl)
    return KLUpdateResult(best[0], best[1], best[2], False)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class SampleBatch:
    X: np.ndarray   # N x T x n
    U: np.ndarray   # N x T x m
    extra: dict = field(default_factory=dict)


class Environment(Protocol):
    def sample(self, controller: LinearGaussianController, n: int,
               rng: np.random.Generator) -> SampleBatch:
        """Run ``controller`` ``n`` times from the initial state distribution."""


class EnvironmentFailure(RuntimeError):
    pass


@dataclass
class IterationRecord:
    iteration: int
    mean_cost: float
    kl: float
    eta: float


@dataclass
class RLResult:
    controller: LinearGaussianController
    curve: list[IterationRecord]
    batches: list[SampleBatch]
    dynamics: TimeVaryingLinearDynamics | None = None


def default_epsilon(T: int, m: int, base: float = 0.1) -> float:
    return float(T * m * base)


def rl_iterate(env: Environment, controller: LinearGaussianController, cost, N: int = 5,
               epsilon: float | None = None, iters: int = 10, seed: int = 0,
               gmm_components: int = 8, prior_strength: float = 1.0, x_floor: float | None = 0.0,
               callback: Callable[[int, SampleBatch], None] | None = None) -> RLResult:
    """Alternate sampling, dynamics fitting and KL-constrained LQR updates.

    The learning curve holds the mean sampled cost of each iteration's batch;
    a final batch is sampled from the returned controller and recorded last.
    ``x_floor`` is passed to :func:`quadratize_cost` (``None`` keeps the exact
    state Hessians).
    """
    if N < 2:
        raise InvalidInputError("rl_iterate needs N >= 2 samples per iteration")
    rng = np.random.default_rng(seed)
    n, m = controller.dims
    if epsilon is None:
        epsilon = default_epsilon(controller.T, m)
    pool: list[np.ndarray] = []
    curve: list[IterationRecord] = []
    batches: list[SampleBatch] = []
    dyn = None

    def draw(ctrl):
        for attempt in range(2):
            try:
                return env.sample(ctrl, N, rng)
            except EnvironmentFailure as exc:
                if attempt:
                    raise
                log.warning("environment failure (%s); resampling once", exc)

    for it in range(iters):
        batch = draw(controller)
        batches.append(batch)
        if callback is not None:
            callback(it, batch)
        pool.append(transitions(batch.X, batch.U))
        Z = np.concatenate(pool)
        K = gmm_components
        while K > 1 and len(Z) < K * (Z.shape[1] + 1):
            K //= 2
        if len(Z) >= K * (Z.shape[1] + 1):
            prior = fit_gmm(Z, K=K, seed=seed + it, strength=prior_strength)
        else:
            prior = None   # too few transitions for even one full-covariance component
            log.warning("only %d transitions of dimension %d; fitting dynamics without a prior",
                        len(Z), Z.shape[1])
        dyn = fit_dynamics(batch.X, batch.U, prior)
        expansion = quadratize_cost(cost, batch.X, batch.U, x_floor=x_floor)
        result = kl_constrained_update(controller, dyn, expansion, epsilon)
        mean_cost = float(np.mean(trajectory_costs(cost, batch.X, batch.U)))
        curve.append(IterationRecord(it, mean_cost, result.kl, result.eta))
        log.info("iter %d  mean cost %.4f  kl %.3f  eta %.3g", it, mean_cost, result.kl, result.eta)
        controller = result.controller

    final = draw(controller)
    batches.append(final)
    if callback is not None:
        callback(iters, final)
    curve.append(IterationRecord(iters, float(np.mean(trajectory_costs(cost, final.X, final.U))), 0.0, 0.0))
    return RLResult(controller, curve, batches, dyn)
