"""Invariant suites run by ``ldpg check``.

Each suite returns a plain dict with a boolean ``passed`` and the worst
observed quantities, so the report is readable on its own.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .ldp import RateFunction, rate
from .mdp import (Mdp, SoftSolution, exact_gradient, gradient_batch, policy_value, soft_advantage,
                  validate_mdp, value, values_batch)
from .optimizer import sgd_run
from .parametrization import softmax_policy
from .theory import TheoryConstants, check_recursion, pl_constant_batch

GRAD_RTOL = 1e-5
FD_STEP = 1e-6


def suite_mdp(mdp: Mdp) -> dict:
    report = validate_mdp(mdp)
    return {"passed": report.ok, "issues": [i.detail for i in report.issues]}


def bellman_residual(mdp: Mdp, tau: float, soft: SoftSolution) -> float:
    """Sup-norm residual of the soft Bellman equation at the returned value."""
    q = mdp.cost + mdp.discount * mdp.transition @ soft.v_star
    v_new = -tau * logsumexp(-q / tau, axis=1)
    return float(np.max(np.abs(v_new - soft.v_star)))


def suite_solution(mdp: Mdp, tau: float, soft: SoftSolution) -> dict:
    residual = bellman_residual(mdp, tau, soft)
    grad = float(np.max(np.abs(exact_gradient(mdp, soft.theta_star, tau))))
    adv = float(np.max(np.abs(soft_advantage(mdp, soft.theta_star, tau))))
    return {"passed": residual < 1e-10 and grad < 1e-8 and adv <= 1e-8,
            "bellman_residual": residual, "grad_inf_norm": grad, "soft_advantage": adv}


def fd_gradient(mdp: Mdp, theta: np.ndarray, tau: float, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``rho . V`` evaluated through ``policy_value``."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for idx in np.ndindex(theta.shape):
        up, down = theta.copy(), theta.copy()
        up[idx] += step
        down[idx] -= step
        v_up = policy_value(mdp, softmax_policy(up), tau)[2]
        v_down = policy_value(mdp, softmax_policy(down), tau)[2]
        out[idx] = (v_up - v_down) / (2.0 * step)
    return out


def suite_gradient(mdp: Mdp, tau: float, n: int = 5, seed: int = 0, scale: float = 1.0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        theta = scale * rng.standard_normal(mdp.cost.shape)
        g = exact_gradient(mdp, theta, tau)
        fd = fd_gradient(mdp, theta, tau)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-12)))
    return {"passed": worst < GRAD_RTOL, "max_relative_error": worst}


def ball_samples(center: np.ndarray, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from the ball of ``radius`` around ``center``."""
    d = center.size
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1)[:, None]
    u *= radius * rng.random(n)[:, None] ** (1.0 / d)
    return center + u.reshape(n, *center.shape)


def suite_inequalities(mdp: Mdp, tau: float, soft: SoftSolution, l1: float, n: int = 1000,
                       radius: float = 0.5, seed: int = 0, tol: float = 1e-12) -> dict:
    """Smoothness, gradient-domination-from-above and PL inequalities on a ball."""
    rng = np.random.default_rng(seed)
    a = ball_samples(soft.theta_star, radius, n, rng)
    b = ball_samples(soft.theta_star, radius, n, rng)
    ga, va = gradient_batch(mdp, a, tau)
    vb = values_batch(mdp, b, tau)
    diff = (b - a).reshape(n, -1)
    gflat = ga.reshape(n, -1)
    smooth_slack = va + np.sum(gflat * diff, axis=1) + 0.5 * l1 * np.sum(diff ** 2, axis=1) - vb
    gap = va - soft.value
    g_sq = np.sum(gflat ** 2, axis=1)
    upper_slack = 2.0 * l1 * gap - g_sq
    mu = pl_constant_batch(mdp, a, tau, soft)
    pl_slack = g_sq - mu * gap
    scale = tol * (1.0 + np.abs(va))
    counts = {"smoothness": int(np.sum(smooth_slack < -scale)),
              "gradient_upper": int(np.sum(upper_slack < -scale)),
              "pl": int(np.sum(pl_slack < -scale))}
    return {"passed": not any(counts.values()), "violations": counts, "n": n, "radius": radius,
            "min_slack": {"smoothness": float(smooth_slack.min()), "gradient_upper": float(upper_slack.min()),
                          "pl": float(pl_slack.min())}}


def suite_recursions(mdp: Mdp, tau: float, soft: SoftSolution, constants: TheoryConstants,
                     theta_init: np.ndarray, noise, n: int, T: int, base_seed: int = 0) -> dict:
    bad, first = 0, None
    for i in range(n):
        traj = sgd_run(mdp, tau, theta_init, constants.schedule, noise, T, base_seed + i, soft=soft)
        rep = check_recursion(traj, constants, mdp, tau, soft)
        if not rep.passed:
            bad += 1
            first = first or {"seed": base_seed + i, "at": rep.first_violation(), "step_ok": rep.step_ok}
    return {"passed": bad == 0, "n_trajectories": n, "T": T, "failed_trajectories": bad,
            "first_failure": first}


def retained_samples(fn: RateFunction, n: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    basis = fn.retained
    return scale * rng.standard_normal((n, basis.shape[1])) @ basis.T


def suite_psi(fn: RateFunction, n: int = 100, n_pairs: int = 1000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    lams = retained_samples(fn, n, rng)
    worst = float("nan")
    if fn.psi_quadratic is not None:
        rel = [abs(fn.psi_quadrature(lam) - fn.psi_leading(lam)) / abs(fn.psi_leading(lam)) for lam in lams]
        worst = float(max(rel))
    zero = fn.psi(np.zeros(fn.spectral.dim))
    x = retained_samples(fn, n_pairs, rng)
    y = retained_samples(fn, n_pairs, rng)
    mid_bad = 0
    for p, q in zip(x, y):
        lhs = fn.psi(0.5 * (p + q))
        rhs = 0.5 * (fn.psi(p) + fn.psi(q))
        mid_bad += lhs > rhs + 1e-12 * (1.0 + abs(rhs))
    passed = zero == 0.0 and mid_bad == 0 and (np.isnan(worst) or worst < 1e-8)
    return {"passed": bool(passed), "closed_vs_quadrature": worst, "psi_zero": zero,
            "midpoint_violations": int(mid_bad)}


def suite_rate(fn: RateFunction, n: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    pts = retained_samples(fn, n, rng, 0.1)
    worst = float("nan")
    if fn.psi_quadratic is not None:
        rel = []
        for p in pts:
            exact = rate(p, fn, method="quadratic")
            rel.append(abs(rate(p, fn, method="numerical") - exact) / exact)
        worst = float(max(rel))
    zero = rate(np.zeros(fn.spectral.dim), fn)
    sphere = retained_samples(fn, 20, rng)
    sphere /= np.linalg.norm(sphere, axis=1)[:, None]
    positive = all(rate(p, fn) > 0 for p in sphere)
    passed = zero == 0.0 and positive and (np.isnan(worst) or worst < 1e-6)
    return {"passed": bool(passed), "numerical_vs_quadratic": worst, "rate_zero": zero,
            "positive_on_sphere": positive}


def suite_maps(maps: dict, dim: int, n: int = 1000, seed: int = 0) -> dict:
    """Round trips ``forward(inverse(w)) = w`` for every invertible map."""
    rng = np.random.default_rng(seed)
    out, ok = {}, True
    for name, pmap in maps.items():
        if not pmap.invertible:
            out[name] = "no inverse"
            continue
        u = rng.standard_normal((n, dim))
        w = np.array([pmap.forward(x) for x in u])
        err = max(float(np.max(np.abs(pmap.forward(pmap.inverse(x)) - x))) for x in w)
        out[name] = err
        ok &= err < 1e-9
    return {"passed": bool(ok), "round_trip_error": out}


def suite_value_consistency(mdp: Mdp, tau: float, soft: SoftSolution) -> dict:
    """``V(theta*)`` from the policy-evaluation path equals the solver's value."""
    err = abs(value(mdp, soft.theta_star, tau) - soft.value)
    return {"passed": err < 1e-10, "error": float(err)}
