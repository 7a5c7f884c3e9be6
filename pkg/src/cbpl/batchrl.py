"""Fitted batch solvers: Q evaluation (FQE), Q iteration (FQI), and the
least-squares policy-iteration pair LSTDQ/LSPI."""

import collections

import numpy as np

from .funcapprox import QFunction, fit_least_squares, greedy_policy
from .mdp import DeterministicPolicy, StochasticPolicy, as_stochastic


class CostSelector:
    """Chooses the per-sample scalar cost: c, g_i, or c + lam.g."""

    def __init__(self, mode, index=None, lam=None):
        if mode not in ("primary", "constraint", "scalarized"):
            raise ValueError(f"unknown cost mode {mode!r}")
        self.mode = mode
        self.index = index
        self.lam = None if lam is None else np.asarray(lam, dtype=float)
        if mode == "constraint" and (index is None or index < 0):
            raise ValueError("constraint mode needs a nonnegative index")
        if mode == "scalarized":
            if self.lam is None or np.any(self.lam < 0):
                raise ValueError("scalarized mode needs a nonnegative lam vector")

    @classmethod
    def primary(cls):
        return cls("primary")

    @classmethod
    def constraint(cls, i):
        return cls("constraint", index=i)

    @classmethod
    def scalarized(cls, lam):
        return cls("scalarized", lam=lam)

    def select(self, dataset):
        if self.mode == "primary":
            return dataset.c
        if self.mode == "constraint":
            if self.index >= dataset.m:
                raise ValueError("constraint index out of range")
            return dataset.g[:, self.index]
        if len(self.lam) != dataset.m:
            raise ValueError("scalarization length must equal the dataset's m")
        return dataset.c + dataset.g @ self.lam


FittedRun = collections.namedtuple("FittedRun",
                                   ["q_final", "per_iteration_bellman_residuals", "K"])

LspiResult = collections.namedtuple("LspiResult",
                                    ["weights", "converged", "iterations"])


def _resolve_gamma(gamma, mdp):
    if gamma is not None:
        return float(gamma)
    if mdp is not None:
        return mdp.gamma
    raise ValueError("provide gamma or an mdp handle")


def _initial_distribution(dataset, mdp, num_states):
    if mdp is not None:
        return mdp.initial_dist
    starts = dataset.x[dataset.t == 0]
    if len(starts) == 0:
        raise ValueError("dataset has no t=0 samples to infer the initial "
                         "distribution from")
    chi = np.bincount(starts, minlength=num_states).astype(float)
    return chi / chi.sum()


def _policy_bootstrap(q, policy, x_next):
    """Q(x', pi(x')) per sample, for deterministic or stochastic pi."""
    vals = q.values()
    if isinstance(policy, StochasticPolicy):
        return np.einsum("na,na->n", policy.probs[x_next], vals[x_next])
    return vals[x_next, policy.actions[x_next]]


def fqe(dataset, policy, cost, K, template, ridge=1e-8, gamma=None, mdp=None):
    """Fitted Q evaluation of a fixed policy.

    K rounds of regression on targets y = c + gamma * Q(x', pi(x'))
    (y = c on done samples); returns (estimate, FittedRun) where the
    estimate averages Q_K(x, pi(x)) over the initial distribution.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    gamma = _resolve_gamma(gamma, mdp)
    costs = cost.select(dataset)
    xs, aa, nx, done = dataset.x, dataset.a, dataset.x_next, dataset.done
    pol_next = None if isinstance(policy, StochasticPolicy) else policy.actions[nx]
    q = template
    residuals = []
    for _ in range(K):
        if pol_next is None:
            bootstrap = _policy_bootstrap(q, policy, nx)
        else:
            bootstrap = q.values()[nx, pol_next]
        y = costs + gamma * np.where(done, 0.0, bootstrap)
        q = fit_least_squares((xs, aa), y, template, ridge=ridge)
        fitted = q.values()[xs, aa]
        residuals.append(float(np.sqrt(np.mean((fitted - y) ** 2))))
    num_states = q.values().shape[0]
    chi = _initial_distribution(dataset, mdp, num_states)
    vals = q.values()
    if isinstance(policy, StochasticPolicy):
        v_pi = np.einsum("xa,xa->x", policy.probs, vals)
    else:
        v_pi = vals[np.arange(num_states), policy.actions]
    estimate = float(chi @ v_pi)
    return estimate, FittedRun(q, residuals, K)


def fqi(dataset, cost, K, template, ridge=1e-8, gamma=None, mdp=None):
    """Fitted Q iteration toward the optimal scalarized cost-to-go.

    Targets y = c + gamma * min_a Q(x', a) (y = c on done samples);
    returns (greedy policy of Q_K, FittedRun).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    gamma = _resolve_gamma(gamma, mdp)
    costs = cost.select(dataset)
    xs, aa, nx, done = dataset.x, dataset.a, dataset.x_next, dataset.done
    q = template
    residuals = []
    for _ in range(K):
        bootstrap = q.values()[nx].min(axis=1)
        y = costs + gamma * np.where(done, 0.0, bootstrap)
        q = fit_least_squares((xs, aa), y, template, ridge=ridge)
        fitted = q.values()[xs, aa]
        residuals.append(float(np.sqrt(np.mean((fitted - y) ** 2))))
    return greedy_policy(q), FittedRun(q, residuals, K)


def lspi_policy(weights, features, tol=1e-6):
    """Greedy policy of a linear Q given by LSTDQ/LSPI weights.

    Values within tol of the row minimum count as tied (lowest action index
    wins), so exact ties are not flipped by ridge or solver noise.
    """
    q = QFunction(weights=np.asarray(weights, dtype=float), features=features)
    return greedy_policy(q, tol=tol)


def _lstdq_accumulate(dataset, cost, features, gamma, ridge, next_actions):
    phi_all = features.phi
    phi = phi_all[dataset.x, dataset.a]
    phi_next = phi_all[dataset.x_next, next_actions]
    phi_next = np.where(dataset.done[:, None], 0.0, phi_next)
    a_tilde = phi.T @ (phi - gamma * phi_next) + ridge * np.eye(features.k)
    b_tilde = phi.T @ cost.select(dataset)
    try:
        return np.linalg.solve(a_tilde, b_tilde)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "singular LSTDQ system; use a positive ridge") from exc


def lstdq(dataset, w, cost, features, gamma, ridge=1e-8):
    """One LSTDQ solve with successor actions greedy under the given w:
    a' = argmin_a w.phi(x', a). Done samples contribute no successor feature."""
    w = np.asarray(w, dtype=float)
    if w.shape != (features.k,):
        raise ValueError("weight length must equal the feature dimension")
    q_next = features.phi[dataset.x_next] @ w
    next_actions = np.argmin(q_next, axis=1)
    return _lstdq_accumulate(dataset, cost, features, gamma, ridge, next_actions)


def lstdq_policy(dataset, policy, cost, features, gamma, ridge=1e-8):
    """LSTDQ in policy-evaluation form: successor actions a' = pi(x')."""
    next_actions = policy.actions[dataset.x_next]
    return _lstdq_accumulate(dataset, cost, features, gamma, ridge, next_actions)


def lspi(dataset, cost, features, gamma, eps_stop=1e-6, max_iters=50, ridge=1e-8):
    """Least-squares policy iteration: iterate w <- lstdq(w) from w = 0
    until the l2 change drops to eps_stop; returns an LspiResult."""
    if eps_stop <= 0:
        raise ValueError("eps_stop must be positive")
    w = np.zeros(features.k)
    for it in range(1, max_iters + 1):
        w_new = lstdq(dataset, w, cost, features, gamma, ridge=ridge)
        change = float(np.linalg.norm(w_new - w))
        w = w_new
        if change <= eps_stop:
            return LspiResult(w, True, it)
    return LspiResult(w, False, max_iters)
