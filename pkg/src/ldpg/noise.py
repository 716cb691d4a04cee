"""Gradient-noise models ``Z = g(theta) - g_hat(theta)``.

Every parameter-independent kind draws its noise in fixed blocks of
:data:`BLOCK` steps from one generator per replica, so a replica's noise
sequence does not depend on how replicas are batched together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import erfcx, log_ndtr, ndtr

from .errors import DomainError

KINDS = ("gaussian-isotropic", "gaussian-diagonal", "truncated-gaussian", "trajectory-estimator")
BLOCK = 256

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Conditional law of the gradient noise.

    ``sigma`` is a scalar, except for ``gaussian-diagonal`` where it is the
    vector of per-coordinate standard deviations.  For the trajectory
    estimator ``sigma`` is the declared sub-Gaussian parameter; it cannot be
    derived from the model itself.
    """

    kind: str
    sigma: object = 0.0
    radius: Optional[float] = None
    n_rollouts: int = 1
    horizon: int = 1
    lmgf_lipschitz: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        sigma = np.asarray(self.sigma, dtype=float)
        if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
            raise DomainError("sigma must be finite and nonnegative")
        if self.kind == "gaussian-diagonal":
            if sigma.ndim != 1:
                raise DomainError("gaussian-diagonal needs a vector of standard deviations")
            sigma.setflags(write=False)
            object.__setattr__(self, "sigma", sigma)
        else:
            if sigma.ndim != 0:
                raise DomainError(f"{self.kind} takes a scalar sigma")
            object.__setattr__(self, "sigma", float(sigma))
        if self.kind == "truncated-gaussian" and (self.radius is None or self.radius <= 0):
            raise DomainError("truncated-gaussian needs a positive radius")
        if self.kind == "trajectory-estimator" and (self.n_rollouts < 1 or self.horizon < 1):
            raise DomainError("trajectory-estimator needs n_rollouts >= 1 and horizon >= 1")
        if self.parameter_free:
            object.__setattr__(self, "lmgf_lipschitz", 0.0)

    @property
    def parameter_free(self) -> bool:
        """Whether the law of ``Z`` is the same at every ``theta``."""
        return self.kind != "trajectory-estimator"

    @property
    def is_gaussian(self) -> bool:
        return self.kind in ("gaussian-isotropic", "gaussian-diagonal")

    @property
    def sub_gaussian_sigma(self) -> float:
        # a Gaussian restricted to a box stays sigma-sub-Gaussian (strong log-concavity)
        return float(np.max(self.sigma)) if np.size(self.sigma) else 0.0

    def std_vector(self, dim: int) -> np.ndarray:
        if self.kind == "gaussian-diagonal":
            if self.sigma.shape != (dim,):
                raise DomainError(f"sigma vector has length {self.sigma.size}, need {dim}")
            return self.sigma
        return np.full(dim, float(self.sigma))

    def covariance(self, dim: int) -> np.ndarray:
        """Covariance of ``Z`` for the parameter-free kinds."""
        std = self.std_vector(dim)
        if self.kind == "truncated-gaussian":
            return np.diag(_truncated_variance(std, self.radius))
        if not self.is_gaussian:
            raise DomainError("covariance is only known for parameter-free noise")
        return np.diag(std ** 2)

    def lmgf(self, lam: np.ndarray):
        """Log-MGF ``log E exp<lam, Z>`` (parameter-free kinds only).

        ``lam`` may carry leading batch axes; the last axis is the noise
        dimension.  A single vector gives a float.
        """
        lam = np.asarray(lam, dtype=float)
        std = self.std_vector(lam.shape[-1])
        if self.is_gaussian:
            out = 0.5 * np.sum((std * lam) ** 2, axis=-1)
        elif self.kind == "truncated-gaussian":
            # far-tail arguments may round to -inf, which callers treat as unbounded
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                out = np.sum(_truncated_lmgf(lam, std, self.radius), axis=-1)
        else:
            raise DomainError("the trajectory estimator has no closed-form log-MGF")
        return float(out) if out.ndim == 0 else out

    def lmgf_grad(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        std = self.std_vector(lam.shape[-1])
        if self.is_gaussian:
            return std ** 2 * lam
        if self.kind == "truncated-gaussian":
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                return _truncated_lmgf_grad(lam, std, self.radius)
        raise DomainError("the trajectory estimator has no closed-form log-MGF")

    def sample_block(self, rng: np.random.Generator, dim: int, steps: int = BLOCK) -> np.ndarray:
        """``(steps, dim)`` independent draws for a parameter-free kind."""
        if self.kind == "gaussian-isotropic":
            return rng.standard_normal((steps, dim)) * self.sigma
        std = self.std_vector(dim)
        if self.is_gaussian:
            return rng.standard_normal((steps, dim)) * std
        if self.kind == "truncated-gaussian":
            out = np.zeros((steps, dim))
            live = std > 0
            if np.any(live):
                bound = self.radius / std[live]
                out[:, live] = stats.truncnorm.rvs(-bound, bound, scale=std[live],
                                                   size=(steps, int(live.sum())), random_state=rng)
            return out
        raise DomainError("trajectory-estimator noise depends on theta; use sample_noise")

    def describe(self) -> dict:
        doc = {"kind": self.kind, "sigma": np.asarray(self.sigma).tolist(),
               "sub_gaussian_sigma": self.sub_gaussian_sigma, "lmgf_lipschitz": self.lmgf_lipschitz}
        if self.kind == "truncated-gaussian":
            doc["radius"] = self.radius
        if self.kind == "trajectory-estimator":
            doc.update(n_rollouts=self.n_rollouts, horizon=self.horizon)
        return doc


def _log_mass(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` for ``lo < hi`` without cancellation."""
    # reflect so the difference is taken in the lower tail
    flip = lo > 0
    lo, hi = np.where(flip, -hi, lo), np.where(flip, -lo, hi)
    log_hi, log_lo = log_ndtr(hi), log_ndtr(lo)
    return log_hi + np.log1p(-np.exp(log_lo - log_hi))


def _truncated_lmgf(lam, std, radius):
    out = np.zeros_like(lam)
    live = std > 0
    s, l = std[live], lam[..., live]
    shift = s * l
    out[..., live] = (0.5 * shift ** 2 + _log_mass(-radius / s - shift, radius / s - shift)
                 - _log_mass(-radius / s, radius / s))
    return out


def _mills(x):
    """``phi(x) / Phi(x)``, stable for large negative ``x``."""
    return np.sqrt(2.0 / np.pi) / erfcx(-x / np.sqrt(2.0))


def _edge_densities(lo, hi):
    """``phi(lo) / mass`` and ``phi(hi) / mass`` with ``mass = Phi(hi) - Phi(lo)``."""
    flip = lo > 0
    lo_r, hi_r = np.where(flip, -hi, lo), np.where(flip, -lo, hi)
    # in the reflected frame lo_r <= 0, so Phi(lo_r) / Phi(hi_r) is a clean ratio
    ratio = np.exp(log_ndtr(lo_r) - log_ndtr(hi_r))
    at_hi = _mills(hi_r) / (1.0 - ratio)
    at_lo = _mills(lo_r) * ratio / (1.0 - ratio)
    return np.where(flip, at_hi, at_lo), np.where(flip, at_lo, at_hi)


def _truncated_lmgf_grad(lam, std, radius):
    out = np.zeros_like(lam)
    live = std > 0
    s, l = std[live], lam[..., live]
    dens_lo, dens_hi = _edge_densities(-radius / s - s * l, radius / s - s * l)
    out[..., live] = s ** 2 * l + s * (dens_lo - dens_hi)
    return out


def _truncated_variance(std, radius):
    out = np.zeros_like(std)
    live = std > 0
    b = radius / std[live]
    mass = 2.0 * ndtr(b) - 1.0
    out[live] = std[live] ** 2 * (1.0 - 2.0 * b * np.exp(-0.5 * b ** 2 - _LOG_SQRT_2PI) / mass)
    return out


class NoiseStream:
    """Per-replica source of parameter-free noise, consumed one step at a time."""

    def __init__(self, model: NoiseModel, dim: int, seed: int):
        self.model = model
        self.dim = dim
        self.rng = np.random.default_rng(seed)
        self._buf = np.empty((0, dim))
        self._pos = 0

    def block(self) -> np.ndarray:
        return self.model.sample_block(self.rng, self.dim)

    def next(self) -> np.ndarray:
        if self._pos == len(self._buf):
            self._buf, self._pos = self.block(), 0
        self._pos += 1
        return self._buf[self._pos - 1]


class BatchNoise:
    """Noise for ``M`` replicas at once, refilled every :data:`BLOCK` steps."""

    def __init__(self, model: NoiseModel, dim: int, seeds):
        self.streams = [NoiseStream(model, dim, int(s)) for s in seeds]
        self._buf = None
        self._pos = BLOCK

    def next(self) -> np.ndarray:
        if self._pos == BLOCK:
            self._buf = np.stack([s.block() for s in self.streams])
            self._pos = 0
        self._pos += 1
        return self._buf[:, self._pos - 1]
