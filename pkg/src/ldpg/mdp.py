"""Exact tabular computations for entropy-regularized MDPs.

Costs are minimized.  The regularized per-stage cost is
``c(s, a) + tau * log pi(a|s)``, i.e. an entropy bonus, so the soft-optimal
policy is strictly interior and has finite softmax parameters.

Parameters ``theta`` are ``(S, A)`` arrays; flattened vectors use row-major
order, so coordinate ``s * A + a`` belongs to ``theta[s, a]``.  Functions whose
name ends in ``_batch`` accept any number of leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .errors import ConvergenceError, DomainError, NumericalError

ROW_SUM_TOL = 1e-12
STATIONARITY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP ``(S, A, P, c, gamma, rho)``.

    ``transition[s, a, s']`` is the probability of moving to ``s'``.
    Construction only checks shapes; use :func:`validate_mdp` for the
    probabilistic invariants.
    """

    transition: np.ndarray
    cost: np.ndarray
    discount: float
    init_dist: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        c = np.asarray(self.cost, dtype=float)
        rho = np.asarray(self.init_dist, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise DomainError(f"transition must have shape (S, A, S), got {p.shape}")
        if c.shape != p.shape[:2]:
            raise DomainError(f"cost must have shape {p.shape[:2]}, got {c.shape}")
        if rho.shape != (p.shape[0],):
            raise DomainError(f"init_dist must have shape ({p.shape[0]},), got {rho.shape}")
        for name, arr in (("transition", p), ("cost", c), ("init_dist", rho)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def dim(self) -> int:
        return self.n_states * self.n_actions

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "cost": self.cost.tolist(),
            "discount": self.discount,
            "init_dist": self.init_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mdp":
        try:
            mdp = cls(
                transition=np.array(doc["transition"], dtype=float),
                cost=np.array(doc["cost"], dtype=float),
                discount=float(doc["discount"]),
                init_dist=np.array(doc["init_dist"], dtype=float),
            )
        except KeyError as exc:
            raise DomainError(f"MDP document is missing field {exc.args[0]!r}") from None
        for key, actual in (("n_states", mdp.n_states), ("n_actions", mdp.n_actions)):
            if key in doc and int(doc[key]) != actual:
                raise DomainError(f"{key}={doc[key]} disagrees with array shapes ({actual})")
        return mdp

    @classmethod
    def load(cls, path) -> "Mdp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class ValidationIssue:
    invariant: str
    index: tuple
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def failed(self, invariant: str) -> bool:
        return any(i.invariant == invariant for i in self.issues)


def validate_mdp(mdp: Mdp) -> ValidationReport:
    """Check the MDP invariants, collecting every violation instead of raising."""
    issues = []
    p = mdp.transition
    for s, a in zip(*np.nonzero(np.abs(p.sum(axis=2) - 1.0) > ROW_SUM_TOL)):
        issues.append(ValidationIssue("row_sum", (int(s), int(a)),
                                      f"transition row sums to {p[s, a].sum():.15g}"))
    for idx in zip(*np.nonzero(p < 0)):
        issues.append(ValidationIssue("nonnegative", tuple(int(i) for i in idx),
                                      f"negative probability {p[idx]:g}"))
    for idx in zip(*np.nonzero(~np.isfinite(mdp.cost))):
        issues.append(ValidationIssue("finite_cost", tuple(int(i) for i in idx), "cost is not finite"))
    if not 0.0 < mdp.discount < 1.0:
        issues.append(ValidationIssue("discount", (), f"discount {mdp.discount} not in (0, 1)"))
    rho = mdp.init_dist
    if abs(rho.sum() - 1.0) > ROW_SUM_TOL or np.any(rho < 0):
        issues.append(ValidationIssue("init_dist", (), "init_dist is not a probability vector"))
    if rho.min() <= 0:
        s = int(np.argmin(rho))
        issues.append(ValidationIssue("exploration", (s,),
                                      f"init_dist[{s}] = {rho[s]:g}; every state needs positive mass"))
    return ValidationReport(tuple(issues))


@dataclass(frozen=True, eq=False)
class SoftSolution:
    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: np.ndarray
    theta_star: np.ndarray
    bellman_residual: float
    value: float
    tau: float
    iterations: int = 0
    stationarity: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "v_star": self.v_star.tolist(),
            "q_star": self.q_star.tolist(),
            "pi_star": self.pi_star.tolist(),
            "theta_star": self.theta_star.tolist(),
            "value": self.value,
            "bellman_residual": self.bellman_residual,
            "stationarity": self.stationarity,
            "iterations": self.iterations,
        }


def softmax_batch(theta: np.ndarray) -> np.ndarray:
    return softmax(theta, axis=-1)


def shift_directions(n_states: int, n_actions: int) -> np.ndarray:
    """Unit-row indicator vectors ``u_s`` of shape ``(S, S*A)``.

    Adding any multiple of ``u_s`` to ``theta`` leaves the softmax policy
    unchanged.
    """
    u = np.zeros((n_states, n_states, n_actions))
    for s in range(n_states):
        u[s, s, :] = 1.0
    return u.reshape(n_states, -1)


def _check_tau(tau: float, allow_zero: bool = False) -> float:
    tau = float(tau)
    if tau < 0 or (tau == 0 and not allow_zero) or not np.isfinite(tau):
        raise DomainError(f"tau must be {'nonnegative' if allow_zero else 'positive'}, got {tau}")
    return tau


def _policy_matrix(mdp: Mdp, probs: np.ndarray) -> np.ndarray:
    """``I - gamma * P_pi`` for each policy in the batch."""
    p_pi = np.einsum("...sa,sat->...st", probs, mdp.transition)
    return np.eye(mdp.n_states) - mdp.discount * p_pi


def _evaluate_batch(mdp: Mdp, probs: np.ndarray, log_probs: np.ndarray, tau: float):
    """Regularized state values and system matrices for a batch of policies."""
    reg_cost = mdp.cost + tau * log_probs if tau > 0 else np.broadcast_to(mdp.cost, probs.shape)
    c_pi = np.sum(probs * reg_cost, axis=-1)
    system = _policy_matrix(mdp, probs)
    v = np.linalg.solve(system, c_pi[..., None])[..., 0]
    return v, system


def _q_from_v(mdp: Mdp, v: np.ndarray) -> np.ndarray:
    return mdp.cost + mdp.discount * np.einsum("sat,...t->...sa", mdp.transition, v)


def policy_value(mdp: Mdp, policy: np.ndarray, tau: float):
    """Exact regularized evaluation of a stationary policy.

    Returns ``(v, q, value)`` where ``v`` solves ``(I - gamma P_pi) v = c_pi``
    with regularized per-stage cost ``c + tau log pi``, ``q = c + gamma P v``
    and ``value = <rho, v>``.  ``tau = 0`` gives the plain discounted cost.
    """
    tau = _check_tau(tau, allow_zero=True)
    probs = np.asarray(policy, dtype=float)
    if probs.shape != mdp.cost.shape:
        raise DomainError(f"policy must have shape {mdp.cost.shape}, got {probs.shape}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise DomainError("policy rows must be probability vectors")
    if tau > 0 and np.any(probs <= 0):
        raise DomainError("entropy regularization needs a strictly positive policy")
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    v, system = _evaluate_batch(mdp, probs, log_probs, tau)
    if not np.all(np.isfinite(v)):
        raise NumericalError("policy evaluation produced non-finite values")
    return v, _q_from_v(mdp, v), float(mdp.init_dist @ v)


def value(mdp: Mdp, theta: np.ndarray, tau: float) -> float:
    """Objective ``V_tau^theta(rho)`` of a softmax parameter."""
    return float(values_batch(mdp, np.asarray(theta, dtype=float), tau))


def values_batch(mdp: Mdp, thetas: np.ndarray, tau: float) -> np.ndarray:
    tau = _check_tau(tau)
    v, _ = _evaluate_batch(mdp, softmax_batch(thetas), log_softmax(thetas, axis=-1), tau)
    return v @ mdp.init_dist


def visitation(mdp: Mdp, policy: np.ndarray) -> np.ndarray:
    """Normalized discounted state-visitation distribution ``d_rho^pi``."""
    probs = np.asarray(policy, dtype=float)
    system = _policy_matrix(mdp, probs)
    d = (1.0 - mdp.discount) * np.linalg.solve(system.T, mdp.init_dist)
    return d / d.sum()


def _inverse_batch_last(system: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inverse of ``(S, S, M)`` stacks, batch axis last.

    ``I - gamma P_pi`` is strictly diagonally dominant, so no pivoting.
    """
    n = system.shape[0]
    a = system.copy()
    inv = np.zeros_like(a)
    for k in range(n):
        inv[k, k] = 1.0
    for k in range(n):
        piv = 1.0 / a[k, k]
        a[k] *= piv
        inv[k] *= piv
        for i in range(n):
            if i != k:
                f = a[i, k].copy()
                a[i] -= f * a[k]
                inv[i] -= f * inv[k]
    return inv


def _sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sequential sum over a short axis; much faster than a strided reduce."""
    x = np.moveaxis(x, axis, 0)
    acc = x[0].copy()
    for k in range(1, x.shape[0]):
        acc += x[k]
    return acc


def gradient_batch(mdp: Mdp, thetas: np.ndarray, tau: float):
    """Exact policy gradients and objective values for a batch of parameters.

    Returns ``(grads, values)`` with ``grads`` shaped like ``thetas``.  The
    work is done with the batch axis last so every operation is a flat
    vector operation over replicas; each replica's result does not depend on
    the rest of the batch.
    """
    thetas = np.asarray(thetas, dtype=float)
    lead = thetas.shape[:-2]
    n_s, n_a = mdp.cost.shape
    th = np.ascontiguousarray(np.moveaxis(thetas.reshape(-1, n_s, n_a), 0, -1))
    top = th[:, 0].copy()
    for a in range(1, n_a):
        np.maximum(top, th[:, a], out=top)
    z = th - top[:, None]
    e = np.exp(z)
    total = _sum(e, 1)[:, None]
    probs = e / total
    log_probs = z - np.log(total)
    p = mdp.transition
    c = mdp.cost[:, :, None]
    c_pi = _sum(probs * (c + tau * log_probs), 1)
    p_pi = _sum(probs[:, :, None, :] * p[:, :, :, None], 1)
    inv = _inverse_batch_last(np.eye(n_s)[:, :, None] - mdp.discount * p_pi)
    v = _sum(inv * c_pi[None, :, :], 1)
    q = c + mdp.discount * _sum(p[:, :, :, None] * v[None, None, :, :], 2)
    adv = q + tau * log_probs - v[:, None, :]
    # (1 - gamma) normalization of d cancels the 1/(1 - gamma) prefactor
    occupancy = _sum(mdp.init_dist[:, None, None] * inv, 0)
    grads = occupancy[:, None, :] * probs * adv
    values = _sum(mdp.init_dist[:, None] * v, 0)
    grads = np.ascontiguousarray(np.moveaxis(grads, -1, 0))
    return grads.reshape(thetas.shape), values.reshape(lead)


def soft_advantage(mdp: Mdp, theta: np.ndarray, tau: float) -> np.ndarray:
    """``A(s, a) = Q(s, a) + tau log pi(a|s) - V(s)`` under the softmax policy."""
    tau = _check_tau(tau)
    theta = np.asarray(theta, dtype=float)
    log_probs = log_softmax(theta, axis=-1)
    v, _ = _evaluate_batch(mdp, np.exp(log_probs), log_probs, tau)
    return _q_from_v(mdp, v) + tau * log_probs - v[:, None]


def exact_gradient(mdp: Mdp, theta: np.ndarray, tau: float) -> np.ndarray:
    """Policy-gradient-theorem gradient ``d(s) pi(a|s) A(s, a) / (1 - gamma)``."""
    tau = _check_tau(tau)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != mdp.cost.shape:
        raise DomainError(f"theta must have shape {mdp.cost.shape}, got {theta.shape}")
    probs = softmax_batch(theta)
    d = visitation(mdp, probs)
    return d[:, None] * probs * soft_advantage(mdp, theta, tau) / (1.0 - mdp.discount)


def hessian(mdp: Mdp, theta: np.ndarray, tau: float, fd_step: float | None = None) -> np.ndarray:
    """Symmetrized central-difference Hessian of the objective, shape ``(d, d)``."""
    tau = _check_tau(tau)
    theta = np.asarray(theta, dtype=float)
    dim = theta.size
    if fd_step is None:
        fd_step = 1e-5 * max(1.0, float(np.max(np.abs(theta))))
    offsets = fd_step * np.eye(dim).reshape(dim, *theta.shape)
    points = np.concatenate([theta + offsets, theta - offsets])
    grads, _ = gradient_batch(mdp, points, tau)
    grads = grads.reshape(2, dim, dim)
    h = (grads[0] - grads[1]) / (2.0 * fd_step)
    h = 0.5 * (h + h.T)
    if not np.all(np.isfinite(h)):
        raise NumericalError("Hessian has non-finite entries")
    return h


def soft_optimal(mdp: Mdp, tau: float, tol: float = 1e-12, max_iter: int = 1_000_000) -> SoftSolution:
    """Soft value iteration to a sup-norm Bellman residual below ``tol``.

    The returned parameter is ``theta* = -Q*/tau`` with no per-state offset.
    """
    tau = _check_tau(tau)
    p, c, gamma = mdp.transition, mdp.cost, mdp.discount

    def backup(v):
        q = c + gamma * (p @ v)
        return -tau * logsumexp(-q / tau, axis=1), q

    v = np.zeros(mdp.n_states)
    residual = np.inf
    for it in range(1, max_iter + 1):
        v_new, _ = backup(v)
        residual = float(np.max(np.abs(v_new - v)))
        v = v_new
        if residual < tol:
            break
    else:
        raise ConvergenceError(f"soft value iteration stopped at residual {residual:.3e}",
                               residual=residual, iterations=max_iter)
    v_next, q = backup(v)
    residual = float(np.max(np.abs(v_next - v)))
    theta = -q / tau
    pi = softmax_batch(theta)
    stationarity = float(np.max(np.abs(exact_gradient(mdp, theta, tau))))
    if stationarity >= STATIONARITY_TOL:
        raise ConvergenceError(f"gradient at theta* is {stationarity:.3e}, not stationary",
                               residual=residual, iterations=it)
    sol = SoftSolution(v_star=v, q_star=q, pi_star=pi, theta_star=theta,
                       bellman_residual=residual, value=float(mdp.init_dist @ v),
                       tau=tau, iterations=it, stationarity=stationarity)
    return sol


def random_mdp(n_states: int, n_actions: int, discount: float = 0.9, seed: int = 0,
               cost_scale: float = 1.0, min_init: float = 0.05) -> Mdp:
    """Seeded random MDP with Dirichlet transitions and uniform costs.

    ``min_init`` mixes the initial distribution with the uniform one so every
    state keeps at least ``min_init / S`` mass.
    """
    rng = np.random.default_rng(seed)
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    transition /= transition.sum(axis=2, keepdims=True)
    cost = cost_scale * rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    rho = (1.0 - min_init) * rho + min_init / n_states
    rho /= rho.sum()
    return Mdp(transition, cost, discount, rho)
