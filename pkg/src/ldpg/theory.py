"""Smoothness and PL constants, the exponential tail-bound ledger, and
pathwise checks of the descent recursions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, InfeasibleError
from .mdp import Mdp, SoftSolution, hessian, softmax_batch, soft_optimal, visitation
from .optimizer import StepSchedule, Trajectory

FEASIBILITY = "(mu*eta - 1) > sigma^2/C_M"


def spectral_norm(matrix: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest absolute eigenvalue of a symmetric matrix by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(matrix.shape[0])
    v /= np.linalg.norm(v)
    norm = 0.0
    for _ in range(max_iter):
        w = matrix @ v
        new = float(np.linalg.norm(w))
        if new == 0.0:
            return 0.0
        v = w / new
        if abs(new - norm) <= tol * new:
            return new
        norm = new
    return norm


def estimate_l1(mdp: Optional[Mdp], tau: float, n_samples: int, radius: float, seed: int = 0, *,
                safety_factor: float = 1.5, soft: Optional[SoftSolution] = None,
                hessian_fn: Optional[Callable] = None, center: Optional[np.ndarray] = None,
                override: Optional[float] = None) -> float:
    """Smoothness constant from Hessian spectral norms near the optimum.

    Hessians are evaluated at the center and at ``n_samples`` points drawn
    uniformly from the ``radius`` ball around it; the largest spectral norm
    is multiplied by ``safety_factor``.  ``hessian_fn`` and ``center``
    replace the MDP objective (useful for synthetic checks).  A positive
    ``override`` is returned unchanged.
    """
    if override is not None:
        if not override > 0:
            raise DomainError("L1 override must be positive")
        return float(override)
    if n_samples < 1:
        raise DomainError("n_samples must be at least 1")
    if hessian_fn is None:
        soft = soft or soft_optimal(mdp, tau)
        center = soft.theta_star
        hessian_fn = lambda th: hessian(mdp, th, tau)  # noqa: E731
    elif center is None:
        raise DomainError("a custom hessian_fn needs a center")
    center = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    worst = spectral_norm(hessian_fn(center))
    for _ in range(n_samples):
        direction = rng.standard_normal(center.shape)
        direction /= np.linalg.norm(direction)
        r = radius * rng.random() ** (1.0 / center.size)
        worst = max(worst, spectral_norm(hessian_fn(center + r * direction)))
    return safety_factor * worst


def pl_prefactor(mdp: Mdp, tau: float, soft: SoftSolution) -> float:
    """``2 tau min(rho) / (S ||d*/rho||_inf)``, so ``mu(theta) = prefactor * min pi^2``."""
    ratio = np.max(visitation(mdp, soft.pi_star) / mdp.init_dist)
    return 2.0 * tau * float(mdp.init_dist.min()) / (mdp.n_states * ratio)


def pl_constant(mdp: Mdp, theta: np.ndarray, tau: float, soft: SoftSolution) -> float:
    """Non-uniform PL constant ``mu(theta)``."""
    if not tau > 0:
        raise DomainError("tau must be positive")
    return float(pl_constant_batch(mdp, np.asarray(theta, dtype=float), tau, soft))


def pl_constant_batch(mdp: Mdp, thetas: np.ndarray, tau: float, soft: SoftSolution) -> np.ndarray:
    probs = softmax_batch(thetas)
    min_prob = probs.reshape(*probs.shape[:-2], -1).min(axis=-1)
    return pl_prefactor(mdp, tau, soft) * min_prob ** 2


@dataclass(frozen=True)
class TheoryConstants:
    """Everything the exponential tail bound depends on."""

    l1: float
    mu: float
    sigma: float
    c_universal: float
    dim: int
    eta: float
    t0: int
    k_const: float
    epsilon: float
    delta_init: float
    gap1: float
    horizon: int
    t0_bounds: dict = field(default_factory=dict)
    k_terms: dict = field(default_factory=dict)
    binding_constraints: tuple = ()

    @property
    def c_m(self) -> float:
        return (self.sigma * math.sqrt(self.dim) * self.c_universal) ** 2

    @property
    def b0(self) -> float:
        return 1.0 / (2.0 * self.eta ** 2 * self.l1 * self.c_m)

    @property
    def c0(self) -> float:
        return 2.0 * self.l1 * self.sigma ** 2

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.eta, self.t0)

    def step(self, t):
        return self.eta / (np.asarray(t, dtype=float) + self.t0 + 1.0)

    def a(self, t):
        t = np.asarray(t, dtype=float)
        eta_t = self.step(t)
        return (t + self.t0 + 1.0) / (t + self.t0) * (1.0 - self.mu * eta_t + self.mu * eta_t ** 2 * self.l1)

    def b(self, t):
        return self.eta / np.sqrt(np.asarray(t, dtype=float) + self.t0)

    def c(self, t):
        return self.eta ** 2 * self.l1 / (np.asarray(t, dtype=float) + self.t0 + 1.0)

    def contraction(self, t):
        """``a_t + B0 C0 b_t^2``; must stay in ``[0, 1)``."""
        return self.a(t) + self.b0 * self.c0 * self.b(t) ** 2

    def k_third_term(self, t):
        return 2.0 * self.c(t) * self.c_m / (1.0 - self.contraction(t))

    def to_dict(self) -> dict:
        return {
            "L1": self.l1, "mu": self.mu, "sigma": self.sigma, "C": self.c_universal,
            "C_M": self.c_m, "B0": self.b0, "C0": self.c0, "eta": self.eta, "t0": self.t0,
            "K": self.k_const, "epsilon": self.epsilon, "Delta": self.delta_init,
            "gap1": self.gap1, "T": self.horizon, "dim": self.dim, "feasible": True,
            "t0_bounds": self.t0_bounds, "K_terms": self.k_terms,
            "binding_constraints": list(self.binding_constraints),
        }


def lemma5_constants(l1: float, mu: float, sigma: float, c_universal: float, eta: float,
                     epsilon: float, delta_init: float, T: int, gap1: float, dim: int) -> TheoryConstants:
    """Smallest ``t0`` and ``K`` meeting every requirement of the tail bound.

    Raises :class:`InfeasibleError` when ``(mu eta - 1) > sigma^2 / C_M``
    fails; the error's ``constraint`` names the inequality.
    """
    if min(l1, mu, sigma, c_universal, eta) <= 0:
        raise DomainError("L1, mu, sigma, C and eta must all be positive")
    if not 0 < epsilon < 1:
        raise DomainError("epsilon must lie in (0, 1)")
    if not delta_init > 0:
        raise DomainError("the warm-start radius Delta must be positive")
    if gap1 < 0:
        raise DomainError("gap1 must be nonnegative")
    if T < 1:
        raise DomainError("T must be positive")
    if mu > l1:
        raise DomainError(f"mu = {mu:g} exceeds L1 = {l1:g}; L1 is not a valid smoothness constant")
    c_m = (sigma * math.sqrt(dim) * c_universal) ** 2
    noise_ratio = sigma ** 2 / c_m  # equals B0 * C0 * eta^2
    margin = (mu * eta - 1.0) - noise_ratio
    # exact equality is infeasible; allow for rounding in mu*eta
    if not margin > 1e-12 * max(1.0, mu * eta):
        raise InfeasibleError(
            f"{FEASIBILITY} fails: mu*eta - 1 = {mu * eta - 1.0:.6g}, sigma^2/C_M = {noise_ratio:.6g}",
            constraint=FEASIBILITY)
    bounds = {
        "eta^2 L1/((mu eta - 1) - B0 C0 eta^2) - 1": eta ** 2 * l1 / margin - 1.0,
        "L1 eta - 2": l1 * eta - 2.0,
        "sqrt(3 sigma^2/(2 epsilon Delta)) - 1": math.sqrt(3.0 * sigma ** 2 / (2.0 * epsilon * delta_init)) - 1.0,
        # a_t + B0 C0 b_t^2 < 1 at t = 1 needs this when mu > 1
        "mu eta^2 L1/((mu eta - 1) - B0 C0 eta^2) - 2": mu * eta ** 2 * l1 / margin - 2.0,
    }
    t0 = max(0, math.ceil(max(bounds.values())))
    # the contraction factor must be strictly below one
    probe = TheoryConstants(l1, mu, sigma, c_universal, dim, eta, t0, 1.0, epsilon, delta_init, gap1, T)
    while probe.contraction(1) >= 1.0:
        t0 += 1
        probe = TheoryConstants(l1, mu, sigma, c_universal, dim, eta, t0, 1.0, epsilon, delta_init, gap1, T)
    ts = np.arange(1, T + 1)
    terms = {
        "1/B0": 1.0 / probe.b0,
        "(t0+1)*gap1": (t0 + 1) * gap1,
        "max_t 2 c_t C_M/(1 - (a_t + B0 C0 b_t^2))": float(np.max(probe.k_third_term(ts))),
    }
    k_const = max(terms.values())
    top_t0 = max(bounds.values())
    binding = [name for name, val in bounds.items() if val == top_t0 and math.ceil(val) == t0]
    binding += [name for name, val in terms.items() if val == k_const]
    return TheoryConstants(l1, mu, sigma, c_universal, dim, eta, t0, k_const, epsilon,
                           delta_init, gap1, T, bounds, terms, tuple(binding))


def exp_bound_exponent(constants: TheoryConstants, t, delta):
    """Raw exponent ``1 - (t + t0 + 1) delta / K`` (useful on log scales)."""
    return 1.0 - (np.asarray(t, dtype=float) + constants.t0 + 1.0) * np.asarray(delta, dtype=float) / constants.k_const


def exp_bound(constants: TheoryConstants, t, delta):
    """Tail bound ``min(1, exp(1 - (t + t0 + 1) delta / K))`` on P(gap_{t+1} >= delta)."""
    if np.any(np.asarray(t) < 1) or np.any(np.asarray(delta) < 0):
        raise DomainError("need t >= 1 and delta >= 0")
    out = np.minimum(1.0, np.exp(np.minimum(exp_bound_exponent(constants, t, delta), 0.0)))
    return float(out) if np.ndim(out) == 0 else out


def auto_eta(mu: float, sigma: float, c_universal: float, dim: int, margin: float = 0.1) -> float:
    """Smallest step scale satisfying the feasibility condition, inflated by ``margin``."""
    noise_ratio = 1.0 / (dim * c_universal ** 2) if sigma > 0 else 0.0
    return (1.0 + margin) * (1.0 + noise_ratio) / mu


@dataclass(frozen=True)
class RecursionReport:
    """Pathwise check results.  Index ``k`` refers to the step ``t = k + 1 -> k + 2``."""

    gap_ok: np.ndarray
    distance_ok: np.ndarray
    gap_slack: np.ndarray
    distance_slack: np.ndarray
    step_ok: bool

    @property
    def passed(self) -> bool:
        return bool(self.step_ok and self.gap_ok.all() and self.distance_ok.all())

    @property
    def n_violations(self) -> int:
        return int((~self.gap_ok).sum() + (~self.distance_ok).sum())

    def first_violation(self) -> Optional[tuple]:
        """``(t, which)`` with ``t`` the iterate whose value breaks its inequality."""
        found = []
        for name, ok in (("gap", self.gap_ok), ("distance", self.distance_ok)):
            bad = np.flatnonzero(~ok)
            if bad.size:
                found.append((int(bad[0]) + 2, name))
        return min(found) if found else None


def check_recursion(trajectory: Trajectory, constants: TheoryConstants, mdp: Mdp, tau: float,
                    soft: SoftSolution, *, rtol: float = 1e-9, atol: float = 1e-12) -> RecursionReport:
    """Evaluate both one-step recursions along a recorded trajectory.

    Gap recursion::

        gap_{t+1} <= (1 - mu eta_t + mu eta_t^2 L1) gap_t
                     + eta_t <g_t, Z_t> + eta_t^2 L1 |Z_t|^2

    with ``mu`` the running minimum of ``mu(theta_l)`` for ``l <= t``, and the
    distance recursion ``|theta_{t+1} - theta*| <= gamma_t |theta_t - theta*|
    + eta_t |Z_t|`` with ``gamma_t^2 = 1 + eta_t L1 + eta_t L1^2/mu(theta_t)
    + eta_t^2 L1^2``.
    """
    n = trajectory.steps
    ts = np.arange(1, n + 1)
    eta_t = trajectory.schedule(ts)
    l1 = constants.l1
    mu_path = pl_constant_batch(mdp, trajectory.thetas[:-1], tau, soft)
    mu_run = np.minimum.accumulate(mu_path)
    gaps = trajectory.gaps
    g = trajectory.grads[:-1].reshape(n, -1)
    z = trajectory.noises.reshape(n, -1)
    inner = np.sum(g * z, axis=1)
    z_sq = np.sum(z * z, axis=1)

    gap_rhs = (1.0 - mu_run * eta_t + mu_run * eta_t ** 2 * l1) * gaps[:-1] + eta_t * inner + eta_t ** 2 * l1 * z_sq
    gap_slack = gap_rhs - gaps[1:]
    gap_ok = gap_slack >= -(atol + rtol * np.abs(gap_rhs))

    dist = trajectory.distances()
    gamma_t = np.sqrt(1.0 + eta_t * l1 + eta_t * l1 ** 2 / mu_path + eta_t ** 2 * l1 ** 2)
    dist_rhs = gamma_t * dist[:-1] + eta_t * np.sqrt(z_sq)
    dist_slack = dist_rhs - dist[1:]
    dist_ok = dist_slack >= -(atol + rtol * np.abs(dist_rhs))

    step_ok = trajectory.schedule.max_step() <= (1.0 + 1e-12) / l1
    return RecursionReport(gap_ok, dist_ok, gap_slack, dist_slack, bool(step_ok))
