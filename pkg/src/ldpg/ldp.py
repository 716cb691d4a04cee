"""Limiting log-MGF, its Legendre-Fenchel conjugate, region rates and
pushforwards of the rate function through parameter maps.

Everything lives on the orthogonal complement of the Hessian's null space
at the optimum.  For softmax that null space is spanned by the per-state
shift directions, along which the iterates do not concentrate; the rate
function is read on the quotient, ``I(theta') = I(P theta')`` with ``P`` the
projection onto the retained eigenvectors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.linalg import eigh
from scipy.special import logsumexp

from .errors import ConvergenceError, DomainError, NumericalError
from .mdp import Mdp, SoftSolution, gradient_batch
from .noise import NoiseModel
from .parametrization import ParamMap

NULL_TOL = 1e-8
QUAD_POINTS = 64
UNBOUNDED = 1e8
PSI_MODES = ("leading", "with-residual")
REGION_KINDS = ("half-space", "ball-complement", "box", "gap-sublevel-complement")


class ProjectionWarning(UserWarning):
    """An input had a component in the discarded null space."""


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Eigendecomposition ``H = Q diag(rho) Q^T`` with eigenvalues descending."""

    q: np.ndarray
    rho_eigs: np.ndarray
    null_mask: np.ndarray
    null_tol: float = NULL_TOL

    @property
    def dim(self) -> int:
        return len(self.rho_eigs)

    @property
    def retained(self) -> np.ndarray:
        return self.q[:, ~self.null_mask]

    @property
    def retained_eigs(self) -> np.ndarray:
        return self.rho_eigs[~self.null_mask]

    @property
    def retained_dim(self) -> int:
        return int((~self.null_mask).sum())

    def hessian(self) -> np.ndarray:
        return (self.q * self.rho_eigs) @ self.q.T

    def project(self, v: np.ndarray) -> np.ndarray:
        """Orthogonal projection onto the retained eigenvectors."""
        v = np.asarray(v, dtype=float).reshape(-1)
        basis = self.retained
        return basis @ (basis.T @ v)

    def null_fraction(self, v: np.ndarray) -> float:
        v = np.asarray(v, dtype=float).reshape(-1)
        norm = np.linalg.norm(v)
        return 0.0 if norm == 0 else float(np.linalg.norm(v - self.project(v)) / norm)


def spectral(hessian_at_opt: np.ndarray, null_tol: float = NULL_TOL) -> SpectralData:
    """Symmetric eigendecomposition with a numerical null-space mask."""
    h = np.asarray(hessian_at_opt, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise DomainError("expected a square matrix")
    if not np.all(np.isfinite(h)):
        raise NumericalError("Hessian has non-finite entries")
    asym = np.max(np.abs(h - h.T))
    if asym > 1e-10 * max(1.0, np.max(np.abs(h))):
        raise DomainError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    try:
        eigs, vecs = eigh(0.5 * (h + h.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigensolver failed: {exc}") from None
    order = np.argsort(eigs)[::-1]
    eigs, vecs = eigs[order], vecs[:, order]
    for arr in (eigs, vecs):
        arr.setflags(write=False)
    mask = eigs < null_tol
    mask.setflags(write=False)
    return SpectralData(vecs, eigs, mask, null_tol)


# ---------------------------------------------------------------- quadrature

def quadrature_rule(exponents: np.ndarray, n_points: int = QUAD_POINTS):
    """Nodes and weights on ``(0, 1]`` for integrands built from ``x**e``.

    ``exponents`` are the ``eta rho_i - 1`` of the retained directions.  The
    substitution ``x = y**m`` makes the endpoint behaviour ``x**(2 e_min)``
    smooth at 0, and Gauss-Legendre panels of ``n_points`` nodes are graded
    geometrically towards ``y = 1`` where large exponents concentrate mass.
    """
    exponents = np.asarray(exponents, dtype=float)
    low = 2.0 * float(exponents.min())
    if low <= -1.0:
        raise DomainError("integrand is not integrable at 0")
    m = max(1, math.ceil(8.0 / (low + 1.0)))
    steepest = m * (2.0 * float(exponents.max()) + 1.0)
    breaks = [0.0, 0.5]
    width = 0.5
    while width * steepest > 1.0 and width > 1e-15:
        width *= 0.5
        breaks.append(1.0 - width)
    breaks.append(1.0)
    base_x, base_w = np.polynomial.legendre.leggauss(n_points)
    ys, ws = [], []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        ys.append(lo + (hi - lo) * (base_x + 1.0) / 2.0)
        ws.append(base_w * (hi - lo) / 2.0)
    y, w = np.concatenate(ys), np.concatenate(ws)
    return y ** m, w * m * y ** (m - 1)


# ---------------------------------------------------------------- residual term

@dataclass
class ResidualModel:
    """Parameters of the correction ``r(lambda)`` for state-dependent noise.

    ``r = 4 L_Lambda eta^2 |lambda|^2 dbar + 2 eta |lambda| hbar(dbar)`` with
    ``dbar = scale * gamma_bar |lambda| K / L1`` and ``gamma_bar =
    sqrt(3 + L1/mu)``.
    """

    lmgf_lipschitz: float
    l1: float
    mu: float
    k_const: float
    h_bar: Callable[[float], float]
    delta_scale: float = 1.0

    @property
    def gamma_bar(self) -> float:
        return math.sqrt(3.0 + self.l1 / self.mu)

    def delta_bar(self, lam_norm: float) -> float:
        return self.delta_scale * self.gamma_bar * lam_norm * self.k_const / self.l1

    def __call__(self, lam: np.ndarray, eta: float) -> float:
        norm = float(np.linalg.norm(lam))
        if norm == 0.0:
            return 0.0
        dbar = self.delta_bar(norm)
        return 4.0 * self.lmgf_lipschitz * eta ** 2 * norm ** 2 * dbar + 2.0 * eta * norm * self.h_bar(dbar)


class LinearizationResidual:
    """Sampled ``hbar(delta) = sup_{|u| <= delta} |g(theta* + u) - H u|``.

    Each sphere radius on a geometric grid is probed with ``n_samples``
    random directions; values between grid points use the next radius up,
    linearly blended, so the result is continuous, nondecreasing and never
    below the sampled supremum at the grid radii.
    """

    def __init__(self, mdp: Mdp, tau: float, soft: SoftSolution, hess: np.ndarray,
                 n_samples: int = 10_000, seed: int = 0, ratio: float = 1.25, start: float = 1e-4):
        self.mdp, self.tau, self.soft = mdp, tau, soft
        self.hess = np.asarray(hess, dtype=float)
        self.n_samples, self.seed = n_samples, seed
        self.ratio, self.start = ratio, start
        self._grid = [0.0]
        self._vals = [0.0]

    def _sphere_max(self, radius: float) -> float:
        rng = np.random.default_rng(self.seed)
        shape = self.soft.theta_star.shape
        dirs = rng.standard_normal((self.n_samples, *shape))
        dirs /= np.linalg.norm(dirs.reshape(self.n_samples, -1), axis=1)[:, None, None]
        u = radius * dirs
        grads, _ = gradient_batch(self.mdp, self.soft.theta_star + u, self.tau)
        lin = u.reshape(self.n_samples, -1) @ self.hess.T
        return float(np.max(np.linalg.norm(grads.reshape(self.n_samples, -1) - lin, axis=1)))

    def _extend(self, delta: float) -> None:
        while self._grid[-1] <= delta * self.ratio or len(self._grid) < 3:
            nxt = self.start if self._grid[-1] == 0.0 else self._grid[-1] * self.ratio
            self._grid.append(nxt)
            self._vals.append(max(self._vals[-1], self._sphere_max(nxt)))

    def __call__(self, delta: float) -> float:
        if delta <= 0:
            return 0.0
        self._extend(delta)
        grid, vals = np.array(self._grid), np.array(self._vals)
        return float(np.interp(delta, grid[:-1], vals[1:]))


# ---------------------------------------------------------------- Psi

def empirical_lmgf(samples: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Plug-in log-MGF ``log mean exp<lam, Z_i>`` from noise draws."""
    z = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    log_n = math.log(len(z))

    def lmgf(lam):
        lam = np.asarray(lam, dtype=float)
        return logsumexp(lam @ z.T, axis=-1) - log_n

    return lmgf


def _eta_of(constants) -> float:
    return float(constants if np.isscalar(constants) else constants.eta)


@dataclass(eq=False)
class RateFunction:
    """Limiting log-MGF ``Psi`` of the scaled iterates and its conjugate ``I``.

    ``psi_quadratic`` is the matrix ``A`` with ``Psi(lam) = lam^T A lam / 2``;
    it is available for Gaussian noise in leading mode.  ``lmgf`` overrides
    the noise model's log-MGF (needed for the trajectory estimator).
    """

    spectral: SpectralData
    noise: NoiseModel
    eta: float
    mode: str = "leading"
    quad_points: int = QUAD_POINTS
    residual: Optional[ResidualModel] = None
    lmgf: Optional[Callable] = None
    psi_quadratic: Optional[np.ndarray] = field(default=None, init=False)

    def __post_init__(self):
        if self.mode not in PSI_MODES:
            raise DomainError(f"unknown psi mode {self.mode!r}")
        if self.mode == "with-residual" and self.residual is None:
            raise DomainError("with-residual mode needs residual parameters")
        if self.lmgf is None and not self.noise.parameter_free:
            raise DomainError("trajectory-estimator noise has no closed-form log-MGF; pass lmgf")
        eigs = self.spectral.retained_eigs
        for i, val in zip(np.flatnonzero(~self.spectral.null_mask), eigs):
            if not 2.0 * self.eta * val > 1.0:
                raise DomainError(f"integrability fails at eigenvalue index {i}: "
                                  f"2 eta rho = {2.0 * self.eta * val:.6g} <= 1")
        basis = self.spectral.retained
        if self.lmgf is None and self.noise.is_gaussian and self.mode == "leading" and eigs.size:
            cov = basis.T @ self.noise.covariance(self.spectral.dim) @ basis
            denom = self.eta * (eigs[:, None] + eigs[None, :]) - 1.0
            a = self.eta ** 2 * basis @ (cov / denom) @ basis.T
            self.psi_quadratic = 0.5 * (a + a.T)
        self._nodes, self._weights = (quadrature_rule(self.eta * eigs - 1.0, self.quad_points)
                                      if eigs.size else (np.zeros(0), np.zeros(0)))
        self._a_pinv = None
        self._last_coords = None

    # ---- Psi

    @property
    def retained(self) -> np.ndarray:
        return self.spectral.retained

    def _coords(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float).reshape(-1)
        frac = self.spectral.null_fraction(lam)
        if frac > 1e-10:
            warnings.warn(f"lambda has a null-space component (fraction {frac:.2e}); projected out",
                          ProjectionWarning, stacklevel=3)
        return self.retained.T @ lam

    def _lmgf(self, v):
        return self.lmgf(v) if self.lmgf is not None else self.noise.lmgf(v)

    def _integrand_vectors(self, coords):
        """``eta Q D(x) Q^T lam`` at every node, shape ``(n_nodes, d)``."""
        eigs = self.spectral.retained_eigs
        scale = self._nodes[:, None] ** (self.eta * eigs - 1.0)
        return self.eta * (scale * coords) @ self.retained.T

    def psi_quadrature(self, lam) -> float:
        coords = self._coords(lam)
        if not np.any(coords):
            return 0.0
        return float(self._weights @ self._lmgf(self._integrand_vectors(coords)))

    def psi_leading(self, lam) -> float:
        if self.psi_quadratic is not None:
            lam = self.retained @ self._coords(lam)
            return 0.5 * float(lam @ self.psi_quadratic @ lam)
        return self.psi_quadrature(lam)

    def psi(self, lam) -> float:
        value = self.psi_leading(lam)
        if self.mode == "with-residual":
            value += self.residual(self.spectral.project(lam), self.eta)
        return value

    def psi_grad(self, lam) -> np.ndarray:
        """Gradient of ``psi`` in the full coordinates (zero along the null space)."""
        coords = self._coords(lam)
        if self.psi_quadratic is not None:
            grad = self.psi_quadratic @ (self.retained @ coords)
        elif self.lmgf is None:
            eigs = self.spectral.retained_eigs
            scale = self._nodes[:, None] ** (self.eta * eigs - 1.0)
            g = self.noise.lmgf_grad(self._integrand_vectors(coords))
            # d/dc of Lambda(eta Q (s * c)) = eta * s * (Q^T grad Lambda)
            grad_c = self.eta * (self._weights[:, None] * scale * (g @ self.retained)).sum(axis=0)
            grad = self.retained @ grad_c
        else:
            grad = self.retained @ _fd_grad(lambda c: self.psi_quadrature(self.retained @ c), coords)
        if self.mode == "with-residual":
            res = lambda c: self.residual(self.retained @ c, self.eta)  # noqa: E731
            grad = grad + self.retained @ _fd_grad(res, coords)
        return grad

    # ---- conjugate

    def a_pinv(self) -> np.ndarray:
        """Pseudo-inverse of ``A`` on the retained subspace."""
        if self.psi_quadratic is None:
            raise DomainError("psi is not exactly quadratic in this mode")
        if self._a_pinv is None:
            basis = self.retained
            inner = basis.T @ self.psi_quadratic @ basis
            self._a_pinv = basis @ np.linalg.inv(inner) @ basis.T
            self._a_pinv = 0.5 * (self._a_pinv + self._a_pinv.T)
        return self._a_pinv

    def rate(self, theta_prime, method: str = "auto") -> float:
        return rate(theta_prime, self, method=method)


def _fd_grad(fn, x, step=1e-6):
    out = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        h = step * max(1.0, abs(x[i]))
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return out


def build_rate_function(hess_at_opt: np.ndarray, noise: NoiseModel, constants, *,
                        mode: str = "leading", quad_points: int = QUAD_POINTS,
                        null_tol: float = NULL_TOL, residual: Optional[ResidualModel] = None,
                        lmgf: Optional[Callable] = None) -> RateFunction:
    """Rate function for the Hessian at the optimum and a noise model."""
    return RateFunction(spectral(hess_at_opt, null_tol), noise, _eta_of(constants), mode,
                        quad_points, residual, lmgf)


def psi(lam, spectral_data: SpectralData, noise: NoiseModel, constants, mode: str = "leading",
        quad_points: int = QUAD_POINTS, *, residual: Optional[ResidualModel] = None,
        method: str = "auto", lmgf: Optional[Callable] = None) -> float:
    """Limiting scaled log-MGF.

    ``method`` is ``"auto"`` (closed form when available), ``"closed"`` or
    ``"quadrature"``.  ``constants`` is a :class:`TheoryConstants` or a bare
    step scale ``eta``.
    """
    fn = RateFunction(spectral_data, noise, _eta_of(constants), mode, quad_points, residual, lmgf)
    if method == "quadrature":
        value = fn.psi_quadrature(lam)
        if mode == "with-residual":
            value += fn.residual(spectral_data.project(lam), fn.eta)
        return value
    if method == "closed" and fn.psi_quadratic is None:
        raise DomainError("no closed form: noise is not Gaussian or mode is with-residual")
    if method not in ("auto", "closed"):
        raise DomainError(f"unknown method {method!r}")
    return fn.psi(lam)


# ---------------------------------------------------------------- rate

class _Unbounded(Exception):
    pass


def _conjugate(theta_r: np.ndarray, fn: RateFunction, starts) -> tuple[float, np.ndarray]:
    """``sup_c <theta_r, c> - Psi(Q c)`` in retained coordinates."""
    basis = fn.retained

    def guard(c):
        if not np.all(np.isfinite(c)) or np.linalg.norm(c) > UNBOUNDED:
            raise _Unbounded

    def neg(c):
        guard(c)
        return fn.psi(basis @ c) - float(theta_r @ c)

    def neg_grad(c):
        guard(c)
        return basis.T @ fn.psi_grad(basis @ c) - theta_r

    best_val, best_c = -np.inf, np.zeros_like(theta_r)
    for c0 in starts:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ProjectionWarning)
                res = optimize.minimize(neg, c0, jac=neg_grad, method="BFGS",
                                        options={"gtol": 1e-9, "maxiter": 2000})
        except _Unbounded:
            return math.inf, c0
        if -res.fun > best_val:
            best_val, best_c = -res.fun, res.x
    return max(0.0, best_val), best_c


def rate(theta_prime, rate_fn: RateFunction, method: str = "auto", seed: int = 0,
         return_maximizer: bool = False):
    """Legendre-Fenchel conjugate ``I(theta') = sup_lam <theta', lam> - Psi(lam)``.

    ``theta'`` is projected onto the retained subspace first.  ``method`` is
    ``"auto"`` (pseudo-inverse formula when ``Psi`` is quadratic),
    ``"quadratic"`` or ``"numerical"``.  An unbounded supremum gives ``inf``.
    """
    theta = rate_fn.spectral.project(theta_prime)
    basis = rate_fn.retained
    theta_r = basis.T @ theta
    if method == "quadratic" or (method == "auto" and rate_fn.psi_quadratic is not None):
        pinv = rate_fn.a_pinv()
        value = 0.5 * float(theta @ pinv @ theta)
        return (value, pinv @ theta) if return_maximizer else value
    if method not in ("auto", "numerical"):
        raise DomainError(f"unknown method {method!r}")
    if not np.any(theta_r):
        return (0.0, np.zeros_like(theta)) if return_maximizer else 0.0
    rng = np.random.default_rng(seed)
    starts = [np.zeros_like(theta_r)]
    if rate_fn.psi_quadratic is not None:
        starts.append(basis.T @ rate_fn.a_pinv() @ theta)
    if rate_fn._last_coords is not None and rate_fn._last_coords.shape == theta_r.shape:
        starts.append(rate_fn._last_coords)
    starts.append(rng.standard_normal(theta_r.shape) * (1.0 + np.linalg.norm(theta_r)))
    value, c = _conjugate(theta_r, rate_fn, starts)
    if math.isfinite(value):
        rate_fn._last_coords = c
    return (value, basis @ c) if return_maximizer else value


def rate_gradient(theta_prime, rate_fn: RateFunction) -> tuple[float, np.ndarray]:
    """``I`` and its gradient (the maximizing ``lambda``, by the envelope theorem)."""
    value, lam = rate(theta_prime, rate_fn, return_maximizer=True)
    return value, rate_fn.spectral.project(lam)


# ---------------------------------------------------------------- regions

@dataclass(frozen=True, eq=False)
class RegionSpec:
    """A set of difference coordinates ``theta' = theta - theta*``.

    ``half-space``: ``<a, theta'> >= b``; ``ball-complement``:
    ``|theta' - center| >= radius``; ``box``: ``lo <= theta' <= hi``;
    ``gap-sublevel-complement``: ``theta'^T H theta' / 2 >= delta`` with ``H``
    the Hessian at the optimum (a local model of the value gap).
    """

    kind: str
    a: Optional[np.ndarray] = None
    b: float = 0.0
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    delta: float = 0.0
    hessian: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise DomainError(f"unknown region kind {self.kind!r}; expected one of {REGION_KINDS}")
        for attr in ("a", "center", "lo", "hi", "hessian"):
            val = getattr(self, attr)
            if val is not None:
                arr = np.array(val, dtype=float)
                arr = arr if attr == "hessian" else arr.reshape(-1)
                arr.setflags(write=False)
                object.__setattr__(self, attr, arr)
        if self.kind == "half-space" and (self.a is None or not np.any(self.a)):
            raise DomainError("half-space needs a nonzero normal a")
        if self.kind == "ball-complement" and (self.center is None or self.radius < 0):
            raise DomainError("ball-complement needs a center and a nonnegative radius")
        if self.kind == "box":
            if self.lo is None or self.hi is None or self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
                raise DomainError("box needs lo <= hi of equal shape")
        if self.kind == "gap-sublevel-complement" and self.delta < 0:
            raise DomainError("gap threshold must be nonnegative")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def contains(self, theta_prime, hessian: Optional[np.ndarray] = None) -> np.ndarray:
        """Membership of one point or a batch ``(..., d)`` (closed region)."""
        x = np.asarray(theta_prime, dtype=float)
        if self.kind == "half-space":
            return x @ self.a >= self.b
        if self.kind == "ball-complement":
            return np.linalg.norm(x - self.center, axis=-1) >= self.radius
        if self.kind == "box":
            return np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        h = self.hessian if self.hessian is not None else hessian
        if h is None:
            raise DomainError("gap-sublevel-complement membership needs the Hessian")
        return 0.5 * np.einsum("...i,ij,...j->...", x, h, x) >= self.delta

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "name": self.label}
        for attr in ("a", "center", "lo", "hi"):
            if getattr(self, attr) is not None:
                doc[attr] = getattr(self, attr).tolist()
        if self.kind == "half-space":
            doc["b"] = self.b
        if self.kind == "ball-complement":
            doc["radius"] = self.radius
        if self.kind == "gap-sublevel-complement":
            doc["delta"] = self.delta
        return doc


@dataclass(frozen=True)
class RegionRate:
    value: float
    minimizer: np.ndarray
    method: str

    def __float__(self):
        return float(self.value)


def _sphere_quadratic_min(b_mat: np.ndarray, center: np.ndarray, radius: float):
    """Global minimum of ``x^T B x / 2`` on the sphere ``|x - center| = radius``."""
    beta, u = np.linalg.eigh(b_mat)
    c = u.T @ center
    g = beta * c  # linear term of the shifted problem, in the eigenbasis
    low = beta[0]
    tol = 1e-12 * max(1.0, np.max(np.abs(beta)))
    hard = np.abs(beta - low) <= tol
    easy_g = np.where(hard, 0.0, g)

    def y_of(lam):
        return -easy_g / (beta + lam)

    if np.all(np.abs(g[hard]) <= 1e-14 * max(1.0, np.linalg.norm(g))):
        # hard case: the secular function stays bounded at lam = -beta_min
        denom = beta - low
        y = np.zeros_like(c)
        live = ~hard
        y[live] = -g[live] / denom[live]
        norm = np.linalg.norm(y)
        if norm <= radius:
            y[np.flatnonzero(hard)[0]] = math.sqrt(max(0.0, radius ** 2 - norm ** 2))
            x = u @ (c + y)
            return 0.5 * float(x @ b_mat @ x), x
    # secular equation |y(lam)| = radius on (-beta_min, inf)
    gap_g = np.where(hard, g, easy_g)

    def secular(lam):
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(gap_g == 0.0, 0.0, gap_g / (beta + lam))
        return 1.0 / radius - 1.0 / np.linalg.norm(terms)

    lo_lam = -low + 1e-15 * max(1.0, abs(low))
    hi_lam = -low + np.linalg.norm(g) / radius + 1.0
    while secular(lo_lam) > 0:
        lo_lam = -low + (lo_lam + low) * 1e-3
        if lo_lam + low < 1e-300:
            break
    lam = optimize.brentq(secular, lo_lam, hi_lam, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(gap_g == 0.0, 0.0, -gap_g / (beta + lam))
    x = u @ (c + y)
    return 0.5 * float(x @ b_mat @ x), x


def region_rate(region: RegionSpec, rate_fn: RateFunction, n_starts: int = 16, seed: int = 0) -> RegionRate:
    """Infimum of ``I`` over the closed region.

    Quadratic ``I`` gets an exact solution for every region kind; otherwise
    the region is searched by multi-start constrained minimization.
    """
    spec = rate_fn.spectral
    d = spec.dim
    zero = np.zeros(d)
    hess = region.hessian if region.hessian is not None else spec.hessian()
    if bool(region.contains(zero, hess)):
        return RegionRate(0.0, zero, "origin-in-region")
    if region.kind == "half-space" and spec.null_fraction(region.a) > 1e-10:
        # the constraint can be met by moving along the null space alone
        a_null = region.a - spec.project(region.a)
        x = a_null * (region.b / float(a_null @ region.a))
        return RegionRate(0.0, x, "null-direction")
    if rate_fn.psi_quadratic is not None:
        return _quadratic_region_rate(region, rate_fn, hess)
    return _general_region_rate(region, rate_fn, hess, n_starts, seed)


def _quadratic_region_rate(region: RegionSpec, fn: RateFunction, hess: np.ndarray) -> RegionRate:
    spec = fn.spectral
    pinv = fn.a_pinv()
    if region.kind == "half-space":
        a = region.a
        denom = float(a @ fn.psi_quadratic @ a)
        x = region.b * (fn.psi_quadratic @ a) / denom
        return RegionRate(region.b ** 2 / (2.0 * denom), x, "closed-form")
    if region.kind == "ball-complement":
        value, x = _sphere_quadratic_min(pinv, region.center, region.radius)
        return RegionRate(max(0.0, value), x, "secular")
    if region.kind == "box":
        res = optimize.minimize(lambda x: 0.5 * x @ pinv @ x, np.clip(0.0, region.lo, region.hi),
                                jac=lambda x: pinv @ x, method="L-BFGS-B",
                                bounds=list(zip(region.lo, region.hi)),
                                options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10_000})
        return RegionRate(float(res.fun), res.x, "box-qp")
    # gap-sublevel-complement: delta * min generalized eigenvalue of (A^+, H) on the retained span
    basis = spec.retained
    h_r = basis.T @ hess @ basis
    p_r = basis.T @ pinv @ basis
    if np.min(np.linalg.eigvalsh(h_r)) <= 0:
        raise DomainError("Hessian is not positive definite on the retained subspace")
    vals, vecs = eigh(p_r, h_r)
    v = vecs[:, 0]
    x = basis @ v * math.sqrt(2.0 * region.delta / float(v @ h_r @ v))
    return RegionRate(region.delta * float(vals[0]), x, "generalized-eigen")


def _general_region_rate(region: RegionSpec, fn: RateFunction, hess: np.ndarray,
                         n_starts: int, seed: int) -> RegionRate:
    spec = fn.spectral
    d = spec.dim
    rng = np.random.default_rng(seed)

    def objective(x):
        value, grad = rate_gradient(x, fn)
        if not math.isfinite(value):
            return 1e300, np.zeros(d)
        return value, grad

    constraints, bounds = [], None
    if region.kind == "half-space":
        constraints.append({"type": "ineq", "fun": lambda x: x @ region.a - region.b,
                            "jac": lambda x: region.a})
    elif region.kind == "ball-complement":
        constraints.append({"type": "ineq",
                            "fun": lambda x: np.sum((x - region.center) ** 2) - region.radius ** 2,
                            "jac": lambda x: 2.0 * (x - region.center)})
    elif region.kind == "box":
        bounds = list(zip(region.lo, region.hi))
    else:
        constraints.append({"type": "ineq", "fun": lambda x: 0.5 * x @ hess @ x - region.delta,
                            "jac": lambda x: hess @ x})

    scale = _region_scale(region, hess)
    best = None
    for k in range(n_starts):
        x0 = _region_start(region, hess, rng, scale, first=(k == 0))
        res = optimize.minimize(objective, x0, jac=True, method="SLSQP", bounds=bounds,
                                constraints=constraints, options={"ftol": 1e-12, "maxiter": 500})
        if not bool(region.contains(res.x + _inward(region, res.x), hess)):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise ConvergenceError("no start reached the region", residual=math.inf, iterations=n_starts)
    return RegionRate(float(best.fun), best.x, "multistart")


def _inward(region: RegionSpec, x):
    """Tiny nudge so boundary points pass the closed membership test despite rounding."""
    if region.kind == "half-space":
        return region.a * 1e-9
    if region.kind == "ball-complement":
        diff = x - region.center
        n = np.linalg.norm(diff)
        return diff / n * 1e-9 if n > 0 else 0.0
    if region.kind == "gap-sublevel-complement":
        return x * 1e-9
    return 0.0


def _region_scale(region: RegionSpec, hess) -> float:
    if region.kind == "half-space":
        return abs(region.b) / np.linalg.norm(region.a) + 1e-3
    if region.kind == "ball-complement":
        return region.radius + np.linalg.norm(region.center)
    if region.kind == "box":
        return float(np.max(np.abs(np.concatenate([region.lo, region.hi]))))
    return math.sqrt(2.0 * region.delta / max(np.linalg.norm(hess, 2), 1e-300))


def _region_start(region: RegionSpec, hess, rng, scale, first) -> np.ndarray:
    d = len(hess)
    if region.kind == "box":
        return np.clip(0.0, region.lo, region.hi) if first else rng.uniform(region.lo, region.hi)
    direction = rng.standard_normal(d)
    if region.kind == "half-space":
        x = direction * scale
        shortfall = region.b - x @ region.a
        return x + max(0.0, shortfall) * region.a / float(region.a @ region.a)
    if region.kind == "ball-complement":
        return region.center + direction / np.linalg.norm(direction) * region.radius * 1.01
    quad = 0.5 * direction @ hess @ direction
    if quad <= 0:
        direction = np.linalg.eigh(hess)[1][:, -1]
        quad = 0.5 * direction @ hess @ direction
    return direction * math.sqrt(region.delta / quad) * 1.01


# ---------------------------------------------------------------- contraction

@dataclass(frozen=True)
class PushforwardValue:
    """``I'(w)`` with the preimage that attains it."""

    value: float
    preimage: np.ndarray
    feasibility: float
    feasible: bool
    method: str

    def __float__(self):
        return float(self.value)


def contract_rate(rate_fn: RateFunction, param_map: ParamMap, w, n_starts: int = 4, *,
                  method: str = "auto", seed: int = 0, feas_tol: float = 1e-7,
                  return_details: bool = False):
    """Pushforward ``I'(w) = inf { I(u) : f(u) = w }``.

    With an invertible map the preimage is unique and ``I'(w) = I(f^-1(w))``.
    Otherwise (or with ``method="penalty"``) an augmented-Lagrangian search
    runs six rounds of increasing penalty from ``n_starts`` starting points.
    A best-effort result whose residual stays above ``feas_tol`` is flagged
    infeasible.
    """
    w = np.asarray(w, dtype=float).reshape(-1)
    if param_map.in_range is not None and not param_map.contains(w):
        raise DomainError(f"w is outside the range of map {param_map.name!r}")
    if method not in ("auto", "inverse", "penalty"):
        raise DomainError(f"unknown method {method!r}")
    if method == "inverse" and not param_map.invertible:
        raise DomainError(f"map {param_map.name!r} has no inverse")
    if param_map.invertible and method != "penalty":
        u = np.asarray(param_map.inverse(w), dtype=float).reshape(-1)
        out = PushforwardValue(rate(u, rate_fn), u, 0.0, True, "inverse")
    else:
        out = _penalty_pushforward(rate_fn, param_map, w, n_starts, seed, feas_tol)
        if not out.feasible:
            warnings.warn(f"pushforward constraint residual {out.feasibility:.2e} exceeds {feas_tol:g}",
                          RuntimeWarning, stacklevel=2)
    return out if return_details else out.value


def _map_jacobian(forward, u, step=1e-7):
    base = np.asarray(forward(u), dtype=float).reshape(-1)
    jac = np.empty((base.size, u.size))
    for i in range(u.size):
        e = np.zeros_like(u)
        h = step * max(1.0, abs(u[i]))
        e[i] = h
        jac[:, i] = (np.asarray(forward(u + e)).reshape(-1) - np.asarray(forward(u - e)).reshape(-1)) / (2 * h)
    return jac


def _penalty_pushforward(fn: RateFunction, param_map: ParamMap, w, n_starts, seed, feas_tol):
    d = fn.spectral.dim
    rng = np.random.default_rng(seed)
    quadratic = fn.psi_quadratic is not None
    pinv = fn.a_pinv() if quadratic else None

    def rate_and_grad(u):
        if quadratic:
            g = pinv @ u
            return 0.5 * float(u @ g), g
        return rate_gradient(u, fn)

    def forward(u):
        return np.asarray(param_map(u), dtype=float).reshape(-1)

    if forward(np.zeros(d)).size != w.size:
        raise DomainError("w has the wrong dimension for this map")
    best = None
    for k in range(max(1, n_starts)):
        u = np.zeros(d) if k == 0 else rng.standard_normal(d) * 0.1 * (1.0 + np.linalg.norm(w))
        mult = np.zeros(w.size)
        rho = 10.0
        for _round in range(6):
            def lagrangian(x, mult=mult, rho=rho):
                val, grad = rate_and_grad(x)
                resid = forward(x) - w
                jac = _map_jacobian(forward, x)
                total = val + mult @ resid + 0.5 * rho * resid @ resid
                return total, grad + jac.T @ (mult + rho * resid)

            res = optimize.minimize(lagrangian, u, jac=True, method="BFGS",
                                    options={"gtol": 1e-11, "maxiter": 5000})
            u = res.x
            resid = forward(u) - w
            mult = mult + rho * resid
            rho *= 10.0
        feas = float(np.linalg.norm(resid))
        value = rate_and_grad(u)[0]
        cand = PushforwardValue(value, u, feas, feas < feas_tol, "augmented-lagrangian")
        if best is None or (cand.feasible, -cand.value) > (best.feasible, -best.value):
            best = cand
    return best
