"""Command-line pipelines: ``ldpg {solve,theory,simulate,rate,compare,check}``.

Exit codes: 0 success, 1 configuration error, 2 numerical or solver error,
3 invariant violation (failed check, flagged bound violation, infeasible
constants).  Every output file carries the config hash and tool version.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, checks
from .config import (Setup, build_rate, build_regions, ensemble_spec, header_lines, jsonable, load_config,
                     resolve, stamp)
from .errors import ConfigError, DomainError, LdpgError, NumericalError
from .ldp import contract_rate, region_rate
from .montecarlo import compare_bounds, run_ensemble, stats_summary, write_checkpoint_table, write_json
from .optimizer import sgd_run
from .parametrization import map_from_spec
from .theory import FEASIBILITY, pl_constant

log = logging.getLogger("ldpg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 1, 2, 3


def _setup(config, seed: Optional[int]) -> Setup:
    cfg = load_config(config)
    if seed is not None:
        cfg["base_seed"] = int(seed)
    return resolve(cfg)


def _write(doc: dict, setup: Setup, out: Path, name: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    write_json(jsonable(stamp(doc, setup)), path)
    return path


def _theory_doc(setup: Setup) -> dict:
    doc = {
        "feasible": setup.constants is not None,
        "feasibility_condition": FEASIBILITY,
        "provenance": setup.provenance,
        "L1": setup.l1, "mu": setup.mu, "mu_at_start": pl_constant(setup.mdp, setup.theta_init, setup.tau,
                                                                    setup.soft),
        "pi_floor": setup.pi_floor, "eta": setup.eta, "t0": setup.t0,
        "Delta": setup.delta_init, "gap1": setup.gap1, "C": setup.cfg["theory"]["C"],
        "sigma": setup.noise.sub_gaussian_sigma,
    }
    if setup.constants is not None:
        doc["constants"] = setup.constants.to_dict()
    else:
        doc["binding_inequality"] = setup.infeasible
    return doc


def cmd_solve(config, out, seed=None, workers=None) -> int:
    setup = _setup(config, seed)
    eigs = np.linalg.eigvalsh(setup.hess)
    doc = {"solution": setup.soft.to_dict(), "hessian_eigenvalues": eigs[::-1],
           "n_states": setup.mdp.n_states, "n_actions": setup.mdp.n_actions}
    _write(doc, setup, Path(out), "solve.json")
    return EXIT_OK


def cmd_theory(config, out, seed=None, workers=None) -> int:
    setup = _setup(config, seed)
    out = Path(out)
    _write(_theory_doc(setup), setup, out, "theory.json")
    if setup.constants is None:
        log.error("constants infeasible: %s", setup.infeasible)
        return EXIT_INVARIANT
    if setup.cfg["plots"]:
        from .plotting import plot_bound

        plot_bound(setup.constants, setup.gap_thresholds(), setup.cfg["T"], out / "bound.png")
    return EXIT_OK


def _simulate(setup: Setup, out: Path, workers, regions=()):
    cfg = setup.cfg
    out.mkdir(parents=True, exist_ok=True)
    header = header_lines(setup.hash)
    if cfg["M"] == 1:
        traj = sgd_run(setup.mdp, setup.tau, setup.theta_init, setup.schedule, setup.noise, cfg["T"],
                       cfg["base_seed"], soft=setup.soft)
        traj.write_csv(out / "trajectory.csv", header)
        if cfg["plots"]:
            from .plotting import plot_trajectory

            plot_trajectory(traj, out / "trajectory.png")
        return None
    spec = ensemble_spec(setup, regions)
    stats = run_ensemble(spec, cfg["M"], cfg["base_seed"], workers=workers, config_hash=setup.hash)
    write_checkpoint_table(stats, out / "checkpoints.csv", setup.constants, header)
    summary = stats_summary(stats)
    summary["theta_init"] = setup.theta_init
    _write(summary, setup, out, "summary.json")
    _write({"manifest": stats.manifest}, setup, out, "manifest.json")
    return stats


def cmd_simulate(config, out, seed=None, workers=None) -> int:
    setup = _setup(config, seed)
    regions = ()
    if setup.cfg["regions"]:
        regions = build_regions(setup, build_rate(setup))
    out = Path(out)
    stats = _simulate(setup, out, workers, regions)
    if stats is not None and setup.cfg["plots"]:
        from .plotting import plot_decay

        plot_decay(stats, out / "decay.png", setup.constants)
    return EXIT_OK


def _rate_doc(setup: Setup) -> tuple[dict, object, tuple]:
    fn = build_rate(setup)
    regions = build_regions(setup, fn)
    rows = []
    for region in regions:
        rr = region_rate(region, fn)
        rows.append({"region": region.to_dict(), "rate_value": rr.value, "minimizer": rr.minimizer,
                     "method": rr.method})
    pushforwards = []
    for m in setup.cfg["maps"]:
        pmap = map_from_spec(m["map"])
        for w in m.get("points", []):
            pv = contract_rate(fn, pmap, np.asarray(w, dtype=float), return_details=True)
            pushforwards.append({"map": m["map"], "w": w, "value": pv.value, "method": pv.method,
                                 "feasible": pv.feasible, "preimage": pv.preimage})
    doc = {"eigenvalues": fn.spectral.rho_eigs, "retained_dim": fn.spectral.retained_dim,
           "null_tol": fn.spectral.null_tol, "psi_mode": fn.mode, "eta": fn.eta,
           "psi_matrix": fn.psi_quadratic, "regions": rows, "pushforwards": pushforwards}
    return doc, fn, regions


def cmd_rate(config, out, seed=None, workers=None) -> int:
    setup = _setup(config, seed)
    doc, _, _ = _rate_doc(setup)
    _write(doc, setup, Path(out), "rate.json")
    return EXIT_OK


def cmd_compare(config, out, seed=None, workers=None) -> int:
    setup = _setup(config, seed)
    out = Path(out)
    rate_doc, fn, regions = _rate_doc(setup)
    stats = _simulate(setup, out, workers, regions)
    if stats is None:
        raise ConfigError("compare needs an ensemble (M > 1)")
    c = setup.cfg["compare"]
    report = compare_bounds(stats, setup.constants, fn, regions, alpha=c["alpha"], z=c["z"],
                            expected_hash=setup.hash, window=c["window"], min_count=c["min_count"])
    flagged = bool(stats.manifest["flagged"])
    doc = {"theory": _theory_doc(setup), "rate": rate_doc, "comparison": report.to_dict(),
           "tail_bound_checked": setup.constants is not None, "divergence_flagged": flagged,
           "passed": report.passed and not flagged}
    _write(doc, setup, out, "compare.json")
    if setup.cfg["plots"]:
        from .plotting import plot_decay

        plot_decay(stats, out / "decay.png", setup.constants, report)
    if setup.constants is None:
        log.warning("tail bound not checked, constants infeasible: %s", setup.infeasible)
    return EXIT_OK if doc["passed"] else EXIT_INVARIANT


def cmd_check(config, out, seed=None, workers=None) -> int:
    setup = _setup(config, seed)
    cfg = setup.cfg
    ck = cfg["check"]
    mdp, tau, soft = setup.mdp, setup.tau, setup.soft
    suites = {
        "mdp": checks.suite_mdp(mdp),
        "solution": checks.suite_solution(mdp, tau, soft),
        "value_consistency": checks.suite_value_consistency(mdp, tau, soft),
        "gradient": checks.suite_gradient(mdp, tau, seed=cfg["base_seed"]),
        "inequalities": checks.suite_inequalities(mdp, tau, soft, setup.l1, ck["n_theta"],
                                                  radius=max(2.0 * setup.delta_init, 1e-3),
                                                  seed=cfg["base_seed"]),
    }
    if setup.constants is not None:
        suites["recursions"] = checks.suite_recursions(mdp, tau, soft, setup.constants, setup.theta_init,
                                                       setup.noise, ck["n_trajectories"], ck["trajectory_T"],
                                                       cfg["base_seed"])
    else:
        suites["recursions"] = {"passed": False, "infeasible": setup.infeasible}
    try:
        fn = build_rate(setup)
    except ConfigError as exc:
        suites["psi"] = {"passed": False, "error": str(exc)}
    else:
        suites["psi"] = checks.suite_psi(fn, seed=cfg["base_seed"])
        suites["rate"] = checks.suite_rate(fn, seed=cfg["base_seed"])
    maps = {m["map"]: map_from_spec(m["map"]) for m in cfg["maps"]}
    suites["maps"] = checks.suite_maps(maps, mdp.dim, seed=cfg["base_seed"])
    passed = all(s["passed"] for s in suites.values())
    _write({"passed": passed, "suites": suites}, setup, Path(out), "check.json")
    for name, s in suites.items():
        log.info("%-18s %s", name, "pass" if s["passed"] else "FAIL")
    return EXIT_OK if passed else EXIT_INVARIANT


COMMANDS = {"solve": cmd_solve, "theory": cmd_theory, "simulate": cmd_simulate, "rate": cmd_rate,
            "compare": cmd_compare, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override base_seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $LDPG_WORKERS or CPU count)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args.config, args.out, seed=args.seed, workers=args.workers)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, DomainError) as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERICAL
    except LdpgError as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
