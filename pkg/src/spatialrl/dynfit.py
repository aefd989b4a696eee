"""Time-varying linear-Gaussian dynamics fitted by regression with a GMM prior.

A Gaussian mixture is fitted to all ``z = [x_t; u_t; x_{t+1}]`` transitions seen
so far. At each timestep the mixture supplies prior moments for that timestep's
samples (weighted by their average responsibilities), which are blended with
the empirical moments in normal-inverse-Wishart fashion. The blended joint
Gaussian is then conditioned on ``[x_t; u_t]`` to give ``f_x, f_u, f_c, F_t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import InvalidInputError

log = logging.getLogger(__name__)


@dataclass
class GmmPrior:
    weights: np.ndarray      # K
    means: np.ndarray        # K x d
    covs: np.ndarray         # K x d x d
    strength: float = 1.0    # pseudo-count n0 per timestep
    objective_history: list = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def log_resp(self, pts: np.ndarray) -> np.ndarray:
        """Per-point log responsibilities, N x K."""
        lp = _component_logpdf(pts, self.means, self.covs) + np.log(self.weights)
        return lp - logsumexp(lp, axis=1, keepdims=True)

    def moments(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mixture mean and covariance under the average responsibility of ``pts``."""
        w = np.exp(self.log_resp(pts)).mean(axis=0)
        w = w / w.sum()
        mu = w @ self.means
        diff = self.means - mu
        phi = np.einsum("k,kij->ij", w, self.covs) + np.einsum("k,ki,kj->ij", w, diff, diff)
        return mu, 0.5 * (phi + phi.T)


@dataclass
class TimeVaryingLinearDynamics:
    fx: np.ndarray        # (T-1) x n x n
    fu: np.ndarray        # (T-1) x n x m
    fc: np.ndarray        # (T-1) x n
    cov: np.ndarray       # (T-1) x n x n
    x0_mean: np.ndarray   # n
    x0_cov: np.ndarray    # n x n

    @property
    def T(self) -> int:
        return self.fx.shape[0] + 1

    @property
    def dims(self) -> tuple[int, int]:
        return self.fu.shape[1], self.fu.shape[2]

    def predict(self, t: int, x, u):
        return self.fx[t] @ x + self.fu[t] @ u + self.fc[t]

    def log_likelihood(self, X: np.ndarray, U: np.ndarray) -> float:
        """Sum of ``log p(x_{t+1} | x_t, u_t)`` over all samples and timesteps."""
        total = 0.0
        n = self.fx.shape[1]
        for t in range(self.T - 1):
            mean = X[:, t] @ self.fx[t].T + U[:, t] @ self.fu[t].T + self.fc[t]
            resid = X[:, t + 1] - mean
            L = np.linalg.cholesky(self.cov[t])
            sol = np.linalg.solve(L, resid.T)
            total += float(-0.5 * np.sum(sol ** 2) - X.shape[0] * (np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi)))
        return total


def _component_logpdf(pts, means, covs):
    N, d = pts.shape
    out = np.empty((N, len(means)))
    for k, (mu, cov) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(cov)
        sol = np.linalg.solve(L, (pts - mu).T)
        out[:, k] = -0.5 * np.sum(sol ** 2, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * d * np.log(2 * np.pi)
    return out


def _kmeans_pp(pts, K, rng):
    centers = [pts[rng.integers(len(pts))]]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(len(pts), p=d2 / total) if total > 0 else rng.integers(len(pts))
        centers.append(pts[idx])
        d2 = np.minimum(d2, np.sum((pts - pts[idx]) ** 2, axis=1))
    centers = np.array(centers)
    for _ in range(10):
        labels = np.argmin(((pts[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for k in range(K):
            if np.any(labels == k):
                centers[k] = pts[labels == k].mean(axis=0)
    return labels


def fit_gmm(transitions: np.ndarray, K: int = 8, seed: int = 0, max_iter: int = 100,
            tol: float = 1e-7, cov_floor: float = 1e-6, strength: float = 1.0) -> GmmPrior:
    """EM for a full-covariance Gaussian mixture, k-means++ initialised.

    The covariance floor enters as a fixed penalty ``-lam/2 * tr(Sigma_k^-1)``
    with ``lam = cov_floor * N / K``, so the M-step stays an exact maximiser and
    the recorded (penalised) objective is non-decreasing.
    """
    Z = np.asarray(transitions, dtype=float)
    N, d = Z.shape
    if N < K * (d + 1):
        raise InvalidInputError(f"fit_gmm needs >= K*(dim+1) = {K * (d + 1)} points, got {N}")
    rng = np.random.default_rng(seed)
    lam = cov_floor * N / K
    eye = np.eye(d)

    labels = _kmeans_pp(Z, K, rng) if K > 1 else np.zeros(N, dtype=int)
    resp = np.zeros((N, K))
    resp[np.arange(N), labels] = 1.0
    history: list[float] = []
    weights = means = covs = None
    for it in range(max_iter):
        # M-step
        nk = resp.sum(axis=0)
        empty = nk < 1e-8 * N
        if np.any(empty):
            hard = np.argmax(resp, axis=1)
            for k in np.flatnonzero(empty):
                big = int(np.argmax(np.bincount(hard, minlength=K)))
                log.debug("GMM component %d empty; splitting component %d", k, big)
                members = np.flatnonzero(hard == big)
                take = members[rng.permutation(len(members))[: max(len(members) // 2, 1)]]
                hard[take] = k
                resp[take] = 0.0
                resp[take, k] = 1.0
            nk = resp.sum(axis=0)
            history.clear()
        weights = nk / N
        means = (resp.T @ Z) / nk[:, None]
        covs = np.empty((K, d, d))
        for k in range(K):
            diff = Z - means[k]
            S = (resp[:, k, None] * diff).T @ diff
            covs[k] = (S + lam * eye) / nk[k]
            covs[k] = 0.5 * (covs[k] + covs[k].T)
        # E-step and objective
        lp = _component_logpdf(Z, means, covs) + np.log(weights)
        ll = logsumexp(lp, axis=1)
        penalty = -0.5 * lam * sum(np.trace(np.linalg.inv(c)) for c in covs)
        obj = float(ll.sum() + penalty) / N
        history.append(obj)
        resp = np.exp(lp - ll[:, None])
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
    return GmmPrior(weights, means, covs, strength=strength, objective_history=history)


def _condition(mu, sigma, nxu, reg, max_reg=1e-2):
    n_in = nxu
    while True:
        s_in = sigma[:n_in, :n_in] + reg * np.eye(n_in)
        try:
            L = np.linalg.cholesky(s_in)
            break
        except np.linalg.LinAlgError:
            reg *= 10.0
            if reg > max_reg:
                raise np.linalg.LinAlgError(
                    f"joint covariance singular even with regularisation {max_reg:g}") from None
    s_cross = sigma[:n_in, n_in:]
    gain = np.linalg.solve(L.T, np.linalg.solve(L, s_cross)).T  # n x (n+m)
    fc = mu[n_in:] - gain @ mu[:n_in]
    cov = sigma[n_in:, n_in:] - gain @ s_in @ gain.T
    return gain, fc, 0.5 * (cov + cov.T)


def _floor_spd(cov, floor):
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return (V * np.maximum(w, floor)) @ V.T


def fit_dynamics(X: np.ndarray, U: np.ndarray, prior: GmmPrior | None = None,
                 regularization: float = 1e-6, cov_floor: float = 1e-8,
                 pool_neighbors: bool | None = None) -> TimeVaryingLinearDynamics:
    """Fit ``p(x_{t+1}|x_t,u_t)`` per timestep from ``X`` (N x T x n) and ``U`` (N x T x m).

    With ``prior is None`` this is plain per-timestep least squares (as a joint
    Gaussian fit). When the sample count cannot support a full-rank empirical
    covariance, samples from timesteps ``t-1`` and ``t+1`` are pooled in.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    N, T, n = X.shape
    m = U.shape[2]
    if N < 2:
        raise InvalidInputError("fit_dynamics needs at least 2 sample trajectories")
    dz = 2 * n + m
    if pool_neighbors is None:
        pool_neighbors = N < dz + 1
    Z = np.concatenate([X[:, :-1], U[:, :-1], X[:, 1:]], axis=2)  # N x (T-1) x dz

    fx = np.empty((T - 1, n, n))
    fu = np.empty((T - 1, n, m))
    fc = np.empty((T - 1, n))
    cov = np.empty((T - 1, n, n))
    for t in range(T - 1):
        if pool_neighbors:
            lo, hi = max(t - 1, 0), min(t + 2, T - 1)
            pts = Z[:, lo:hi].reshape(-1, dz)
        else:
            pts = Z[:, t]
        Ns = len(pts)
        mun = pts.mean(axis=0)
        diff = pts - mun
        empsig = diff.T @ diff / Ns
        if prior is not None:
            mu0, phi = prior.moments(pts)
            n0 = prior.strength
            d0 = mun - mu0
            sigma = (Ns * empsig + n0 * phi + (Ns * n0 / (Ns + n0)) * np.outer(d0, d0)) / (Ns + n0)
            mu = (Ns * mun + n0 * mu0) / (Ns + n0)
        else:
            sigma, mu = empsig, mun
        sigma = 0.5 * (sigma + sigma.T)
        gain, fc[t], c = _condition(mu, sigma, n + m, regularization)
        fx[t], fu[t] = gain[:, :n], gain[:, n:]
        cov[t] = _floor_spd(c, cov_floor)

    x0 = X[:, 0]
    x0_mean = x0.mean(axis=0)
    d = x0 - x0_mean
    x0_cov = _floor_spd(d.T @ d / N, 1e-6)
    return TimeVaryingLinearDynamics(fx, fu, fc, cov, x0_mean, x0_cov)


def transitions(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Stack all ``[x_t; u_t; x_{t+1}]`` triples from N x T trajectories."""
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    return np.concatenate([X[:, :-1], U[:, :-1], X[:, 1:]], axis=2).reshape(-1, 2 * X.shape[2] + U.shape[2])
