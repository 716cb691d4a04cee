"""Stochastic softmax policy gradient ``theta <- theta - eta_t (g - Z)``."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import log_softmax

from .errors import DivergenceError, DomainError
from .mdp import Mdp, SoftSolution, gradient_batch, soft_optimal
from .noise import BatchNoise, NoiseModel

DIVERGENCE_LIMIT = 1e8


@dataclass(frozen=True)
class StepSchedule:
    """Decaying step ``eta_t = eta / (t + t0 + 1)`` for ``t >= 1``."""

    eta: float
    t0: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError(f"eta must be positive, got {self.eta}")
        if self.t0 < 0:
            raise DomainError(f"t0 must be nonnegative, got {self.t0}")

    def __call__(self, t):
        return self.eta / (np.asarray(t, dtype=float) + self.t0 + 1.0)

    def max_step(self) -> float:
        return self.eta / (self.t0 + 2.0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One SGD run.

    ``thetas[k]``, ``gaps[k]`` and ``grads[k]`` describe iterate ``t = k + 1``
    (so there are ``T + 1`` of them); ``noises[k]`` is the ``Z_t`` used in the
    step from ``t = k + 1`` to ``t = k + 2``.
    """

    thetas: np.ndarray
    gaps: np.ndarray
    noises: np.ndarray
    grads: np.ndarray
    schedule: StepSchedule
    seed: int
    theta_star: np.ndarray

    def __post_init__(self):
        n = len(self.thetas)
        if len(self.gaps) != n or len(self.grads) != n or len(self.noises) != n - 1:
            raise DomainError("inconsistent trajectory lengths")

    @property
    def steps(self) -> int:
        return len(self.noises)

    def distances(self) -> np.ndarray:
        diff = (self.thetas - self.theta_star).reshape(len(self.thetas), -1)
        return np.linalg.norm(diff, axis=1)

    def with_gaps(self, gaps) -> "Trajectory":
        return Trajectory(self.thetas, np.asarray(gaps, dtype=float), self.noises, self.grads,
                          self.schedule, self.seed, self.theta_star)

    def write_csv(self, path, header_comments=()) -> None:
        """Checkpoint table with columns ``t, gap, theta_norm, noise_norm``."""
        noise_norm = np.linalg.norm(self.noises.reshape(self.steps, -1), axis=1)
        theta_norm = np.linalg.norm(self.thetas.reshape(len(self.thetas), -1), axis=1)
        with open(path, "w", newline="") as fh:
            for line in header_comments:
                fh.write(f"# {line}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "gap", "theta_norm", "noise_norm"])
            for k in range(len(self.thetas)):
                nz = repr(float(noise_norm[k])) if k < self.steps else ""
                writer.writerow([k + 1, repr(float(self.gaps[k])), repr(float(theta_norm[k])), nz])


def run_batch(mdp: Mdp, tau: float, theta_init: np.ndarray, schedule: StepSchedule,
              model: NoiseModel, steps: int, seeds, visit: Callable, *,
              noise_fn: Optional[Callable] = None) -> np.ndarray:
    """Advance one replica per seed for ``steps`` SGD steps.

    ``visit(t, thetas, grads, values, noise, alive)`` is called for
    ``t = 1 .. steps + 1`` with the iterate at time ``t``; ``noise`` is the
    ``Z_t`` about to be applied (``None`` on the final call).  Replicas whose
    iterate leaves ``|theta| <= 1e8`` are frozen and reported through
    ``alive``; the step at which each one diverged is returned (0 = never).
    """
    seeds = [int(s) for s in seeds]
    m = len(seeds)
    thetas = np.broadcast_to(np.asarray(theta_init, dtype=float), (m, *mdp.cost.shape)).copy()
    dim = mdp.dim
    noise_src = BatchNoise(model, dim, seeds) if model.parameter_free else None
    diverged_at = np.zeros(m, dtype=int)
    alive = np.ones(m, dtype=bool)
    for t in range(1, steps + 2):
        grads, values = gradient_batch(mdp, thetas, tau)
        if t == steps + 1:
            visit(t, thetas, grads, values, None, alive)
            break
        if noise_src is not None:
            z = noise_src.next().reshape(thetas.shape)
        else:
            z = noise_fn(t, thetas, grads)
        visit(t, thetas, grads, values, z, alive)
        update = thetas - schedule(t) * (grads - z)
        # NaN fails the comparison, so it counts as divergence too
        bad = alive & ~(np.max(np.abs(update.reshape(m, -1)), axis=1) <= DIVERGENCE_LIMIT)
        if np.any(bad):
            diverged_at[bad] = t
            alive &= ~bad
        if alive.all():
            thetas = update
        else:
            thetas = np.where(alive[:, None, None], update, thetas)
    return diverged_at


def sgd_run(mdp: Mdp, tau: float, theta_init: np.ndarray, schedule: StepSchedule,
            model: NoiseModel, T: int, seed: int, *, soft: Optional[SoftSolution] = None,
            delta: Optional[float] = None, l1: Optional[float] = None) -> Trajectory:
    """Run ``T`` noisy policy-gradient steps from ``theta_init``.

    When ``delta`` is given the start must lie within ``delta`` of ``theta*``;
    when ``l1`` is given every step size must be at most ``1 / l1``.
    """
    if T < 1:
        raise DomainError("T must be positive")
    soft = soft or soft_optimal(mdp, tau)
    theta_init = np.asarray(theta_init, dtype=float)
    if delta is not None:
        dist = float(np.linalg.norm(theta_init - soft.theta_star))
        if dist > delta:
            raise DomainError(f"start is {dist:.4g} from theta*, outside the warm-start ball {delta:g}")
    if l1 is not None and schedule.max_step() > 1.0 / l1 * (1 + 1e-12):
        raise DomainError(f"first step {schedule.max_step():.4g} exceeds 1/L1 = {1.0 / l1:.4g}")

    thetas = np.empty((T + 1, *mdp.cost.shape))
    grads = np.empty_like(thetas)
    gaps = np.empty(T + 1)
    noises = np.empty((T, *mdp.cost.shape))
    rng = np.random.default_rng(seed)

    def visit(t, th, g, v, z, alive):
        thetas[t - 1], grads[t - 1], gaps[t - 1] = th[0], g[0], v[0] - soft.value
        if z is not None:
            noises[t - 1] = z[0]

    def estimator_noise(t, th, g):
        est = trajectory_gradient_estimate(mdp, th[0], tau, model.n_rollouts, model.horizon, rng)
        return (g[0] - est)[None]

    diverged = run_batch(mdp, tau, theta_init, schedule, model, T, [seed], visit,
                         noise_fn=None if model.parameter_free else estimator_noise)
    if diverged[0]:
        raise DivergenceError(f"iterate diverged at step {diverged[0]}", step=int(diverged[0]))
    return Trajectory(thetas, gaps, noises, grads, schedule, int(seed), soft.theta_star.copy())


def sample_noise(model: NoiseModel, theta: np.ndarray, rng: np.random.Generator, *,
                 mdp: Optional[Mdp] = None, tau: Optional[float] = None) -> np.ndarray:
    """One draw of ``Z`` given ``theta``; the estimator kind also needs ``mdp`` and ``tau``."""
    theta = np.asarray(theta, dtype=float)
    if model.parameter_free:
        return model.sample_block(rng, theta.size, steps=1)[0].reshape(theta.shape)
    if mdp is None or tau is None:
        raise DomainError("trajectory-estimator noise needs the MDP and tau")
    grad, _ = gradient_batch(mdp, theta, tau)
    return grad - trajectory_gradient_estimate(mdp, theta, tau, model.n_rollouts, model.horizon, rng)


def _categorical(rng, probs):
    """One draw per row of ``probs``."""
    u = rng.random(len(probs))
    idx = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def trajectory_gradient_estimate(mdp: Mdp, theta: np.ndarray, tau: float, n_rollouts: int,
                                 horizon: int, rng: np.random.Generator, *,
                                 return_stderr: bool = False):
    """REINFORCE estimate of the regularized gradient from truncated rollouts.

    Each rollout contributes ``sum_k gamma^k G_k grad log pi(a_k|s_k)`` where
    ``G_k`` is the discounted regularized cost-to-go from step ``k`` to the
    horizon.  Truncation biases the estimate by at most
    ``gamma^horizon * max|c + tau log pi| / (1 - gamma)`` per coordinate.
    """
    if n_rollouts < 1 or horizon < 1:
        raise DomainError("n_rollouts and horizon must be positive")
    theta = np.asarray(theta, dtype=float)
    log_pi = log_softmax(theta, axis=1)
    pi = np.exp(log_pi)
    gamma = mdp.discount
    n, n_states = n_rollouts, mdp.n_states
    states = np.empty((horizon, n), dtype=int)
    actions = np.empty((horizon, n), dtype=int)
    costs = np.empty((horizon, n))
    s = _categorical(rng, np.broadcast_to(mdp.init_dist, (n, n_states)))
    for k in range(horizon):
        a = _categorical(rng, pi[s])
        states[k], actions[k] = s, a
        costs[k] = mdp.cost[s, a] + tau * log_pi[s, a]
        if k + 1 < horizon:
            s = _categorical(rng, mdp.transition[s, a])
    to_go = np.empty_like(costs)
    acc = np.zeros(n)
    for k in range(horizon - 1, -1, -1):
        acc = costs[k] + gamma * acc
        to_go[k] = acc
    weights = (gamma ** np.arange(horizon))[:, None] * to_go
    per_rollout = np.zeros((n, *theta.shape))
    rows = np.arange(n)
    for k in range(horizon):
        # grad log pi(a|s) = e_a - pi(.|s) on row s
        per_rollout[rows, states[k], actions[k]] += weights[k]
        per_rollout[rows, states[k], :] -= weights[k][:, None] * pi[states[k]]
    estimate = per_rollout.mean(axis=0)
    if not return_stderr:
        return estimate
    stderr = per_rollout.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(theta.shape, np.inf)
    return estimate, stderr
