"""Feature point post-processing: presence, Kalman filtering, pruning, ranking.

Each 2D feature point is tracked by a constant-acceleration Kalman filter with
state ``[x, y, vx, vy, ax, ay]``. Frames whose presence falls below the
threshold are treated as missing observations (time update only). Noise
parameters and the initial moments are fitted by EM with the kinematic
transition and the position-only observation matrix held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import InvalidInputError
from .dynfit import fit_dynamics, fit_gmm, transitions

log = logging.getLogger(__name__)

LOG2PI = np.log(2 * np.pi)


@dataclass
class KalmanModel:
    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    P0: np.ndarray
    loglik_history: list = field(default_factory=list)

    @property
    def dt(self) -> float:
        return float(self.A[0, 2])


def kinematic_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    I = np.eye(2)
    Z = np.zeros((2, 2))
    A = np.block([[I, dt * I, 0.5 * dt * dt * I], [Z, I, dt * I], [Z, Z, I]])
    H = np.hstack([I, Z, Z])
    return A, H


def constant_acceleration_model(dt: float, q: float = 1e-2, r: float = 1e-3,
                                mu0=None, p0: float = 1.0) -> KalmanModel:
    A, H = kinematic_matrices(dt)
    mu = np.zeros(6) if mu0 is None else np.concatenate([np.asarray(mu0, float), np.zeros(4)])
    return KalmanModel(A, H, q * np.eye(6), r * np.eye(2), mu, p0 * np.eye(6))


def _sym(M):
    return 0.5 * (M + M.T)


def _floor(M, eps):
    w, V = np.linalg.eigh(_sym(M))
    return (V * np.maximum(w, eps)) @ V.T


@dataclass
class FilterResult:
    means: np.ndarray        # T x 6 filtered
    covs: np.ndarray         # T x 6 x 6
    pred_means: np.ndarray   # T x 6 (prior at each t)
    pred_covs: np.ndarray
    loglik: float

    @property
    def positions(self) -> np.ndarray:
        return self.means[:, :2]

    @property
    def velocities(self) -> np.ndarray:
        return self.means[:, 2:4]


def _check_obs(observations, mask):
    y = np.asarray(observations, dtype=float)
    if mask is None:
        mask = np.ones(len(y), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if y.ndim != 2 or y.shape[1] != 2 or mask.shape != (len(y),):
        raise InvalidInputError("observations must be T x 2 with a length-T mask")
    return y, mask


def kalman_filter(model: KalmanModel, observations, presence_mask=None) -> FilterResult:
    """Forward filter; masked frames receive the time update only."""
    y, mask = _check_obs(observations, presence_mask)
    T = len(y)
    d = model.A.shape[0]
    A, H, Q, R = model.A, model.H, model.Q, model.R
    means = np.zeros((T, d))
    covs = np.zeros((T, d, d))
    pm = np.zeros((T, d))
    pc = np.zeros((T, d, d))
    m, P = model.mu0.copy(), model.P0.copy()
    ll = 0.0
    I = np.eye(d)
    for t in range(T):
        pm[t], pc[t] = m, P
        if mask[t]:
            S = _sym(H @ P @ H.T + R)
            L = np.linalg.cholesky(S)
            innov = y[t] - H @ m
            w = np.linalg.solve(L, innov)
            ll += -0.5 * (w @ w) - np.sum(np.log(np.diag(L))) - 0.5 * len(innov) * LOG2PI
            G = np.linalg.solve(S, H @ P).T
            m = m + G @ innov
            IKH = I - G @ H
            P = _sym(IKH @ P @ IKH.T + G @ R @ G.T)
        means[t], covs[t] = m, P
        m = A @ m
        P = _sym(A @ P @ A.T + Q)
    return FilterResult(means, covs, pm, pc, float(ll))


def kalman_smoother(model: KalmanModel, observations, presence_mask=None):
    """RTS smoother. Returns (smoothed means, covs, lag-one covs Cov(x_{t+1}, x_t), filter result)."""
    fr = kalman_filter(model, observations, presence_mask)
    T, d = fr.means.shape
    ms = fr.means.copy()
    Ps = fr.covs.copy()
    lag = np.zeros((max(T - 1, 0), d, d))
    A = model.A
    for t in range(T - 2, -1, -1):
        Ppred = fr.pred_covs[t + 1]
        J = np.linalg.solve(Ppred, A @ fr.covs[t]).T
        ms[t] = fr.means[t] + J @ (ms[t + 1] - fr.pred_means[t + 1])
        Ps[t] = _sym(fr.covs[t] + J @ (Ps[t + 1] - Ppred) @ J.T)
        lag[t] = Ps[t + 1] @ J.T
    return ms, Ps, lag, fr


def kalman_em(observations: Sequence, presence_masks: Sequence | None = None, dt: float = 0.05,
              iters: int = 50, tol_per_frame: float = 1e-6, init: KalmanModel | None = None,
              eps: float = 1e-12) -> KalmanModel:
    """Fit ``Q``, ``R`` and the initial moments by EM over several sequences.

    ``observations`` is a list of (T_k, 2) arrays; ``presence_masks`` a matching
    list of boolean arrays. The log-likelihood before each M-step is stored in
    ``loglik_history`` (non-decreasing up to round-off).
    """
    obs = [np.asarray(o, dtype=float) for o in observations]
    masks = ([np.ones(len(o), bool) for o in obs] if presence_masks is None
             else [np.asarray(mk, bool) for mk in presence_masks])
    n_present = sum(int(mk.sum()) for mk in masks)
    if n_present == 0:
        raise InvalidInputError("kalman_em: every observation is masked")
    if max(int(mk.sum()) for mk in masks) < 3:
        raise InvalidInputError("kalman_em needs a sequence with >= 3 present observations")
    n_frames = sum(len(o) for o in obs)

    if init is None:
        first = np.array([o[mk][0] for o, mk in zip(obs, masks) if mk.any()])
        present = np.concatenate([o[mk] for o, mk in zip(obs, masks)])
        spread = float(np.var(present, axis=0).mean()) + 1e-6
        model = constant_acceleration_model(dt, q=spread * 1e-2, r=spread * 1e-2,
                                            mu0=first.mean(axis=0), p0=spread)
    else:
        model = KalmanModel(init.A, init.H, init.Q.copy(), init.R.copy(), init.mu0.copy(), init.P0.copy())
    A, H = model.A, model.H
    d = A.shape[0]
    history: list[float] = []
    for it in range(iters):
        S00 = np.zeros((d, d))
        S11 = np.zeros((d, d))
        S10 = np.zeros((d, d))
        Rsum = np.zeros((2, 2))
        m0s, P0s = [], []
        n_trans = 0
        ll = 0.0
        for y, mk in zip(obs, masks):
            ms, Ps, lag, fr = kalman_smoother(model, y, mk)
            ll += fr.loglik
            Ex = Ps + np.einsum("ti,tj->tij", ms, ms)
            S00 += Ex[:-1].sum(axis=0)
            S11 += Ex[1:].sum(axis=0)
            S10 += (lag + np.einsum("ti,tj->tij", ms[1:], ms[:-1])).sum(axis=0)
            n_trans += len(y) - 1
            r = y[mk] - ms[mk] @ H.T
            Rsum += r.T @ r + np.einsum("ij,tjk,lk->il", H, Ps[mk], H)
            m0s.append(ms[0])
            P0s.append(Ps[0])
        history.append(ll)
        if it > 0 and history[-1] - history[-2] < tol_per_frame * n_frames:
            break
        Q = (S11 - A @ S10.T - S10 @ A.T + A @ S00 @ A.T) / max(n_trans, 1)
        R = Rsum / n_present
        mu0 = np.mean(m0s, axis=0)
        P0 = np.mean([P + np.outer(m - mu0, m - mu0) for P, m in zip(P0s, m0s)], axis=0)
        model = KalmanModel(A, H, _floor(Q, eps), _floor(R, eps), mu0, _floor(P0, eps))
    model.loglik_history = history
    return model


class FeatureTracker:
    """Online Kalman filtering of several feature points, one step at a time."""

    def __init__(self, models: Sequence[KalmanModel]):
        self.models = list(models)
        self.reset()

    def reset(self) -> None:
        self.means = [m.mu0.copy() for m in self.models]
        self.covs = [m.P0.copy() for m in self.models]
        self._started = False

    def update(self, points: np.ndarray, present: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Consume one frame; returns filtered positions (k, 2) and velocities (k, 2)."""
        pos = np.zeros((len(self.models), 2))
        vel = np.zeros((len(self.models), 2))
        for i, mdl in enumerate(self.models):
            m, P = self.means[i], self.covs[i]
            if self._started:
                m = mdl.A @ m
                P = _sym(mdl.A @ P @ mdl.A.T + mdl.Q)
            if present[i]:
                H, R = mdl.H, mdl.R
                S = _sym(H @ P @ H.T + R)
                G = np.linalg.solve(S, H @ P).T
                m = m + G @ (points[i] - H @ m)
                IKH = np.eye(len(m)) - G @ H
                P = _sym(IKH @ P @ IKH.T + G @ R @ G.T)
            self.means[i], self.covs[i] = m, P
            pos[i], vel[i] = m[:2], m[2:4]
        self._started = True
        return pos, vel


# ---------------------------------------------------------------------------
# pruning


class PruningError(RuntimeError):
    pass


@dataclass
class FeatureSelection:
    kept_indices: list[int]
    beta: float
    goal_positions: np.ndarray          # C x 2, averaged over goal frames (all features)
    presence_min: np.ndarray            # C
    presence_mean: np.ndarray           # C
    goal_window: int = 50
    ranking: list[int] | None = None

    def to_dict(self) -> dict:
        return {
            "kept_indices": list(map(int, self.kept_indices)),
            "beta": self.beta,
            "goal_window": self.goal_window,
            "goal_positions": self.goal_positions.tolist(),
            "presence_min": self.presence_min.tolist(),
            "presence_mean": self.presence_mean.tolist(),
            "ranking": self.ranking,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSelection":
        return cls(list(d["kept_indices"]), float(d["beta"]), np.asarray(d["goal_positions"]),
                   np.asarray(d["presence_min"]), np.asarray(d["presence_mean"]),
                   int(d.get("goal_window", 50)), d.get("ranking"))


def select_by_presence(points: np.ndarray, presence: np.ndarray, beta: float = 0.95,
                       prune: bool = True) -> FeatureSelection:
    """Keep feature ``c`` iff its presence is >= beta in every goal frame.

    ``points`` is (F, C, 2) and ``presence`` (F, C) over the goal frames. Values
    are sorted before averaging so the result does not depend on frame order.
    """
    points = np.asarray(points, dtype=float)
    presence = np.asarray(presence, dtype=float)
    if len(points) < 1:
        raise InvalidInputError("need at least one goal frame")
    goal = np.sort(points, axis=0).mean(axis=0)
    pres_sorted = np.sort(presence, axis=0)
    pmin = pres_sorted[0]
    pmean = pres_sorted.mean(axis=0)
    C = points.shape[1]
    kept = [c for c in range(C) if pmin[c] >= beta] if prune else list(range(C))
    sel = FeatureSelection(kept, beta, goal, pmin, pmean, goal_window=len(points))
    if not kept:
        stats = ", ".join(f"{c}: min {pmin[c]:.3f} mean {pmean[c]:.3f}" for c in range(C))
        raise PruningError(f"no feature present in all goal frames at beta={beta}; presence {stats}")
    return sel


def prune_by_goal_presence(goal_frames, model, beta: float = 0.95, prune: bool = True) -> FeatureSelection:
    from .dsae import encode, presence

    probs, pts = encode(model, np.asarray(goal_frames))
    pres = presence(model, probs, pts)
    return select_by_presence(pts, pres, beta, prune)


# ---------------------------------------------------------------------------
# predictiveness ranking


def _regression_loglik(Y: np.ndarray, Xin: np.ndarray, ridge: float = 1e-6) -> float:
    """Log-likelihood of ``Y`` under a linear-Gaussian regression on ``Xin`` fitted by ML."""
    N = len(Y)
    if Xin.shape[1]:
        Xa = np.hstack([Xin, np.ones((N, 1))])
        G = Xa.T @ Xa + ridge * np.eye(Xa.shape[1])
        W = np.linalg.solve(G, Xa.T @ Y)
        resid = Y - Xa @ W
    else:
        resid = Y - Y.mean(axis=0)
    S = resid.T @ resid / N + ridge * np.eye(Y.shape[1])
    L = np.linalg.cholesky(S)
    sol = np.linalg.solve(L, resid.T)
    return float(-0.5 * np.sum(sol ** 2) - N * (np.sum(np.log(np.diag(L))) + 0.5 * Y.shape[1] * LOG2PI))


def predictiveness(robot: np.ndarray, actions: np.ndarray, features: np.ndarray, subset: Sequence[int],
                   gmm_components: int = 4, seed: int = 0, ridge: float = 1e-6,
                   use_prior: bool = True) -> float:
    """Mean per-trajectory value of the predictiveness measure for a feature subset.

    ``robot`` (N, T, r), ``actions`` (N, T, m), ``features`` (N, T, C, 2).
    The first term is the log-likelihood of ``[robot; f_subset]`` transitions
    under fitted time-varying dynamics; the second the log-likelihood of the
    remaining features given the subset under one pooled linear-Gaussian model.
    """
    N, T, C, _ = features.shape
    subset = sorted(subset)
    rest = [c for c in range(C) if c not in subset]
    X = np.concatenate([robot, features[:, :, subset].reshape(N, T, -1)], axis=2)
    prior = None
    if use_prior:
        Z = transitions(X, actions)
        K = gmm_components
        while K > 1 and len(Z) < K * (Z.shape[1] + 1):
            K //= 2
        prior = fit_gmm(Z, K=K, seed=seed, max_iter=30, cov_floor=ridge)
    dyn = fit_dynamics(X, actions, prior, regularization=ridge, pool_neighbors=False)
    term1 = dyn.log_likelihood(X, actions)
    term2 = 0.0
    if rest:
        Y = features[:, :, rest].reshape(N * T, -1)
        Xin = features[:, :, subset].reshape(N * T, -1)
        term2 = _regression_loglik(Y, Xin, ridge)
    return (term1 + term2) / N


def predictiveness_rank(robot: np.ndarray, actions: np.ndarray, features: np.ndarray,
                        **kw) -> list[int]:
    """Greedy backward elimination; returns features ordered best first.

    At each round the feature whose removal lowers the measure least is
    eliminated (lowest index on ties).
    """
    C = features.shape[2]
    current = list(range(C))
    eliminated: list[int] = []
    while len(current) > 1:
        scores = []
        for c in current:
            sub = [j for j in current if j != c]
            scores.append(predictiveness(robot, actions, features, sub, **kw))
        best = int(np.argmax(scores))  # first max -> lowest index among ties
        log.info("rank: eliminating feature %d (score %.2f)", current[best], scores[best])
        eliminated.append(current.pop(best))
    return current + eliminated[::-1]
