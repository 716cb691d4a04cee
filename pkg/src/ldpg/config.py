"""Experiment configuration: JSON schema with defaults, validation and hashing.

The schema is a nested table of ``(type, default)`` pairs.  A user config
is merged over the defaults, checked, and hashed in canonical form; the MDP
file, if any, is inlined before hashing so the hash tracks its content.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .errors import ConfigError, DomainError, InfeasibleError
from .ldp import (LinearizationResidual, RateFunction, RegionSpec, ResidualModel, build_rate_function,
                  empirical_lmgf)
from .mdp import (Mdp, SoftSolution, exact_gradient, hessian, random_mdp, soft_optimal, validate_mdp,
                  value)
from .montecarlo import EnsembleSpec, checkpoint_grid
from .noise import KINDS, NoiseModel
from .optimizer import StepSchedule, trajectory_gradient_estimate
from .theory import TheoryConstants, auto_eta, estimate_l1, lemma5_constants, pl_constant, pl_prefactor

AUTO = "auto"

# name -> (accepted types, default); nested dicts are sub-schemas
SCHEMA: dict[str, Any] = {
    "mdp": (dict, None),
    "tau": ((int, float), None),
    "noise": {
        "kind": (str, "gaussian-isotropic"),
        "sigma": ((int, float, list), 0.05),
        "radius": ((int, float, type(None)), None),
        "n_rollouts": (int, 16),
        "horizon": (int, 50),
    },
    "init": {
        "delta": ((int, float), 0.05),
        "direction": ((str, list), "top-eigenvector"),
        "seed": (int, 0),
    },
    "schedule": {
        "eta": ((int, float, str), AUTO),
        "t0": ((int, str), AUTO),
        "eta_margin": ((int, float), 0.1),
    },
    "theory": {
        "C": ((int, float), 2.0),
        "epsilon": ((int, float), 0.1),
        "L1": ((int, float, type(None)), None),
        "l1_samples": (int, 50),
        "l1_radius": ((int, float, type(None)), None),
        "l1_safety": ((int, float), 1.5),
        "mu": ((int, float, str), "ball-bound"),
        "mu_radius": ((int, float, type(None)), None),
        "seed": (int, 0),
    },
    "T": (int, 1000),
    "M": (int, 100),
    "base_seed": (int, 0),
    "chunk": (int, 1000),
    "regions": (list, []),
    "gap_thresholds": {
        "relative": (list, [0.01, 0.05, 0.1]),
        "absolute": (list, []),
    },
    "checkpoints": {"base": ((int, float), 1.3)},
    "ldp": {
        "psi_mode": (str, "leading"),
        "quad_points": (int, 64),
        "null_tol": ((int, float), 1e-8),
        "residual_samples": (int, 10_000),
        "delta_scale": ((int, float), 1.0),
        "lmgf_lipschitz": ((int, float), 0.0),
        "lmgf_samples": (int, 20_000),
    },
    "maps": (list, []),
    "compare": {
        "alpha": ((int, float), 1e-3),
        "z": ((int, float), 3.0),
        "window": ((int, float), 0.6),
        "min_count": (int, 10),
    },
    "check": {
        "n_theta": (int, 1000),
        "n_trajectories": (int, 20),
        "trajectory_T": (int, 2000),
    },
    "plots": (bool, True),
}

REQUIRED = ("mdp", "tau")


def _merge(schema: dict, doc: dict, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    unknown = set(doc) - set(schema)
    if unknown:
        raise ConfigError(f"unknown key(s) at {path or 'top level'}: {sorted(unknown)}")
    out = {}
    for key, spec in schema.items():
        where = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _merge(spec, doc.get(key, {}), where)
            continue
        types, default = spec
        if key not in doc:
            if key in REQUIRED and not path:
                raise ConfigError(f"missing required key {where!r}")
            out[key] = copy.deepcopy(default)
            continue
        val = doc[key]
        # bool is an int subclass; only accept it where bool is declared
        if isinstance(val, bool) and types is not bool:
            raise ConfigError(f"{where} has type bool")
        if not isinstance(val, types):
            raise ConfigError(f"{where} has type {type(val).__name__}")
        out[key] = val
    return out


def _check(cfg: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg["tau"] > 0, "tau must be positive")
    src = cfg["mdp"]
    need(sum(k in src for k in ("file", "inline", "random")) == 1,
         "mdp needs exactly one of 'file', 'inline', 'random'")
    noise = cfg["noise"]
    need(noise["kind"] in KINDS, f"noise.kind must be one of {KINDS}")
    need(cfg["T"] >= 1 and cfg["M"] >= 1, "T and M must be positive")
    need(cfg["chunk"] >= 1, "chunk must be positive")
    need(cfg["init"]["delta"] >= 0, "init.delta must be nonnegative")
    sched = cfg["schedule"]
    need(sched["eta"] == AUTO or (not isinstance(sched["eta"], str) and sched["eta"] > 0),
         "schedule.eta must be positive or 'auto'")
    need(sched["t0"] == AUTO or (not isinstance(sched["t0"], str) and sched["t0"] >= 0),
         "schedule.t0 must be a nonnegative integer or 'auto'")
    th = cfg["theory"]
    need(0 < th["epsilon"] < 1, "theory.epsilon must lie in (0, 1)")
    need(th["C"] > 0, "theory.C must be positive")
    need(th["mu"] in ("ball-bound", "at-start") or (not isinstance(th["mu"], str) and th["mu"] > 0),
         "theory.mu must be 'ball-bound', 'at-start' or a positive number")
    need(cfg["ldp"]["psi_mode"] in ("leading", "with-residual"), "ldp.psi_mode must be leading or with-residual")
    need(cfg["checkpoints"]["base"] > 1, "checkpoints.base must exceed 1")
    need(0 < cfg["compare"]["window"] <= 1, "compare.window must lie in (0, 1]")
    for j, reg in enumerate(cfg["regions"]):
        need(isinstance(reg, dict) and "kind" in reg, f"regions[{j}] needs a kind")
    for j, m in enumerate(cfg["maps"]):
        need(isinstance(m, dict) and isinstance(m.get("map"), str), f"maps[{j}] needs a 'map' string")


def load_config(path_or_doc, base_dir: Optional[Path] = None) -> dict:
    """Read, validate and resolve a config (a path or an already-parsed dict)."""
    if isinstance(path_or_doc, (str, Path)):
        path = Path(path_or_doc)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        base_dir = path.parent
    else:
        doc = copy.deepcopy(path_or_doc)
    cfg = _merge(SCHEMA, doc, "")
    _check(cfg)
    src = cfg["mdp"]
    if "file" in src:
        mdp_path = Path(src["file"])
        if not mdp_path.is_absolute() and base_dir is not None:
            mdp_path = base_dir / mdp_path
        try:
            cfg["mdp"] = {"inline": json.loads(mdp_path.read_text())}
        except FileNotFoundError:
            raise ConfigError(f"MDP file not found: {mdp_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"MDP file is not valid JSON: {exc}") from None
    return cfg


def config_hash(cfg: dict) -> str:
    """First 16 hex digits of the SHA-256 of the canonical resolved config."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_mdp(cfg: dict) -> Mdp:
    src = cfg["mdp"]
    try:
        if "inline" in src:
            mdp = Mdp.from_dict(src["inline"])
        else:
            r = src["random"]
            mdp = random_mdp(int(r["n_states"]), int(r["n_actions"]), float(r.get("discount", 0.9)),
                             int(r.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad MDP description: {exc}") from None
    report = validate_mdp(mdp)
    if not report.ok:
        raise ConfigError("MDP fails validation: " + "; ".join(i.detail for i in report.issues))
    return mdp


def build_noise(cfg: dict) -> NoiseModel:
    n = cfg["noise"]
    try:
        return NoiseModel(n["kind"], n["sigma"], n["radius"], n["n_rollouts"], n["horizon"])
    except DomainError as exc:
        raise ConfigError(f"bad noise model: {exc}") from None


def build_region(doc: dict, dim: int, hess: Optional[np.ndarray] = None,
                 basis: Optional[np.ndarray] = None) -> RegionSpec:
    """Region from JSON; a normal ``"a": "eigen:k"`` is the k-th retained eigenvector."""
    doc = dict(doc)
    a = doc.get("a")
    if isinstance(a, str):
        if not a.startswith("eigen:") or basis is None:
            raise ConfigError(f"region normal {a!r} not understood")
        k = int(a.split(":", 1)[1])
        if not 0 <= k < basis.shape[1]:
            raise ConfigError(f"region normal {a!r}: only {basis.shape[1]} retained eigenvectors")
        doc["a"] = basis[:, k]
    for key in ("a", "center", "lo", "hi"):
        if key in doc and np.size(doc[key]) != dim:
            raise ConfigError(f"region {key} has length {np.size(doc[key])}, need {dim}")
    if doc.get("kind") == "gap-sublevel-complement" and hess is not None:
        doc.setdefault("hessian", hess)
    try:
        return RegionSpec(**doc)
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"bad region {doc.get('name', doc.get('kind'))!r}: {exc}") from None


@dataclass(eq=False)
class Setup:
    """Resolved experiment: MDP, optimum, start point, step schedule and constants."""

    cfg: dict
    hash: str
    mdp: Mdp
    tau: float
    soft: SoftSolution
    noise: NoiseModel
    hess: np.ndarray
    theta_init: np.ndarray
    delta_init: float
    gap1: float
    l1: float
    mu: float
    pi_floor: float
    eta: float
    t0: int
    constants: Optional[TheoryConstants]
    infeasible: Optional[str]
    provenance: dict

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.eta, self.t0)

    def gap_thresholds(self) -> tuple:
        rel = [float(f) * self.gap1 for f in self.cfg["gap_thresholds"]["relative"]]
        return tuple(rel + [float(x) for x in self.cfg["gap_thresholds"]["absolute"]])


def _start_direction(cfg: dict, soft: SoftSolution, hess: np.ndarray) -> np.ndarray:
    spec = cfg["init"]["direction"]
    shape = soft.theta_star.shape
    if isinstance(spec, list):
        u = np.asarray(spec, dtype=float).reshape(-1)
        if u.size != hess.shape[0] or not np.any(u):
            raise ConfigError("init.direction must be a nonzero vector of length S*A")
    elif spec == "top-eigenvector":
        u = np.linalg.eigh(hess)[1][:, -1]
    elif spec == "random":
        u = np.random.default_rng(cfg["init"]["seed"]).standard_normal(hess.shape[0])
    else:
        raise ConfigError(f"init.direction {spec!r} not understood")
    return (u / np.linalg.norm(u)).reshape(shape)


def resolve(cfg: dict) -> Setup:
    """Solve the MDP and derive every automatic quantity, recording provenance."""
    h = config_hash(cfg)
    mdp = build_mdp(cfg)
    tau = float(cfg["tau"])
    soft = soft_optimal(mdp, tau)
    noise = build_noise(cfg)
    hess = hessian(mdp, soft.theta_star, tau)
    prov = {}
    delta = float(cfg["init"]["delta"])
    theta_init = soft.theta_star + delta * _start_direction(cfg, soft, hess)
    delta_init = float(np.linalg.norm(theta_init - soft.theta_star))
    gap1 = value(mdp, theta_init, tau) - soft.value
    th = cfg["theory"]
    ball = th["l1_radius"] if th["l1_radius"] is not None else max(2.0 * delta_init, 1e-3)
    l1 = estimate_l1(mdp, tau, th["l1_samples"], ball, th["seed"], safety_factor=th["l1_safety"],
                     soft=soft, override=th["L1"])
    prov["L1"] = "override" if th["L1"] is not None else "derived"
    mu_radius = th["mu_radius"] if th["mu_radius"] is not None else 2.0 * delta_init
    # log pi is sqrt(2)-Lipschitz in theta, so the floor holds on the mu_radius ball
    pi_floor = float(soft.pi_star.min()) * math.exp(-math.sqrt(2.0) * mu_radius)
    if th["mu"] == "ball-bound":
        mu = pl_prefactor(mdp, tau, soft) * pi_floor ** 2
        prov["mu"] = "derived"
    elif th["mu"] == "at-start":
        mu = pl_constant(mdp, theta_init, tau, soft)
        prov["mu"] = "derived"
    else:
        mu = float(th["mu"])
        prov["mu"] = "override"
    sigma = noise.sub_gaussian_sigma
    sched = cfg["schedule"]
    if sched["eta"] == AUTO:
        eta = auto_eta(mu, sigma, th["C"], mdp.dim, sched["eta_margin"])
        prov["eta"] = "derived"
    else:
        eta = float(sched["eta"])
        prov["eta"] = "config"
    constants, infeasible = None, None
    t0 = None
    try:
        constants = lemma5_constants(l1, mu, sigma, th["C"], eta, th["epsilon"], delta_init, cfg["T"],
                                     max(gap1, 0.0), mdp.dim)
        t0 = constants.t0
    except InfeasibleError as exc:
        infeasible = exc.constraint or str(exc)
    except DomainError as exc:
        infeasible = str(exc)
    if sched["t0"] != AUTO:
        t0 = int(sched["t0"])
        prov["t0"] = "config"
    elif t0 is None:
        t0 = max(0, math.ceil(l1 * eta - 2.0))
        prov["t0"] = "derived (step-size bound only)"
    else:
        prov["t0"] = "derived"
    prov.update(K="derived" if constants is not None else "unavailable", Delta="derived", gap1="derived")
    return Setup(cfg, h, mdp, tau, soft, noise, hess, theta_init, delta_init, gap1, l1, mu, pi_floor,
                 eta, t0, constants, infeasible, prov)


def build_rate(setup: Setup) -> RateFunction:
    """Rate function for the resolved experiment at its step scale."""
    lcfg = setup.cfg["ldp"]
    lmgf = None
    if not setup.noise.parameter_free:
        rng = np.random.default_rng(setup.cfg["base_seed"])
        theta = setup.soft.theta_star
        grad = exact_gradient(setup.mdp, theta, setup.tau).reshape(-1)
        draws = np.array([grad - trajectory_gradient_estimate(setup.mdp, theta, setup.tau,
                                                              setup.noise.n_rollouts, setup.noise.horizon,
                                                              rng).reshape(-1)
                          for _ in range(lcfg["lmgf_samples"])])
        lmgf = empirical_lmgf(draws)
    residual = None
    if lcfg["psi_mode"] == "with-residual":
        if setup.constants is None:
            raise ConfigError(f"with-residual mode needs feasible constants: {setup.infeasible}")
        h_bar = LinearizationResidual(setup.mdp, setup.tau, setup.soft, setup.hess,
                                      lcfg["residual_samples"], setup.cfg["theory"]["seed"])
        residual = ResidualModel(lcfg["lmgf_lipschitz"], setup.l1, setup.mu, setup.constants.k_const,
                                 h_bar, lcfg["delta_scale"])
    try:
        return build_rate_function(setup.hess, setup.noise, setup.eta, mode=lcfg["psi_mode"],
                                   quad_points=lcfg["quad_points"], null_tol=lcfg["null_tol"],
                                   residual=residual, lmgf=lmgf)
    except DomainError as exc:
        raise ConfigError(f"rate function unavailable: {exc}") from None


def build_regions(setup: Setup, rate_fn: Optional[RateFunction] = None) -> tuple:
    basis = rate_fn.spectral.retained if rate_fn is not None else None
    return tuple(build_region(doc, setup.mdp.dim, setup.hess, basis) for doc in setup.cfg["regions"])


def ensemble_spec(setup: Setup, regions: tuple = ()) -> EnsembleSpec:
    cfg = setup.cfg
    return EnsembleSpec(setup.mdp, setup.tau, setup.soft, setup.noise, setup.schedule, setup.theta_init,
                        cfg["T"], tuple(regions), setup.gap_thresholds(),
                        checkpoint_grid(cfg["T"] + 1, cfg["checkpoints"]["base"]),
                        pi_floor=setup.pi_floor, chunk=cfg["chunk"])


def stamp(doc: dict, setup_or_hash) -> dict:
    """Attach the config hash and tool version to an output document."""
    h = setup_or_hash if isinstance(setup_or_hash, str) else setup_or_hash.hash
    out = {"config_hash": h, "version": __version__}
    out.update(doc)
    return out


def header_lines(h: str) -> list[str]:
    return [f"config_hash={h}", f"version={__version__}"]


def jsonable(obj):
    """Recursively convert numpy values for ``json.dump``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return jsonable(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj
