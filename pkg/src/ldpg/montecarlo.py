"""Ensemble simulation and empirical tail-rate estimation.

Replica ``i`` always uses seed ``base_seed + i`` and replicas are grouped in
chunks of fixed size, so results do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from .errors import ConfigError, DomainError, EstimationError
from .ldp import RateFunction, RegionSpec, region_rate
from .mdp import Mdp, SoftSolution, softmax_batch
from .noise import NoiseModel
from .optimizer import StepSchedule, run_batch, trajectory_gradient_estimate
from .theory import TheoryConstants, exp_bound, exp_bound_exponent

CHUNK = 1000
MIN_COUNT = 10
WINDOW = 0.6
WORKERS_ENV = "LDPG_WORKERS"


def checkpoint_grid(T: int, base: float = 1.3) -> np.ndarray:
    """Distinct ``ceil(base**k)`` values up to ``T``."""
    if T < 1:
        raise DomainError("T must be positive")
    out, k = [], 0
    while True:
        t = math.ceil(base ** k - 1e-9)
        if t > T:
            break
        if not out or t > out[-1]:
            out.append(t)
        k += 1
    return np.array(out, dtype=int)


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    """Everything one replica needs; picklable so chunks can run in worker processes.

    Iterates are indexed ``t = 1 .. T + 1`` with ``theta_1 = theta_init``;
    counts are taken at ``checkpoints`` (values of ``t``).  ``pi_floor`` is
    the smallest action probability for which the PL lower bound in use
    holds; replicas staying above it satisfy the conditioning event.
    """

    mdp: Mdp
    tau: float
    soft: SoftSolution
    noise: NoiseModel
    schedule: StepSchedule
    theta_init: np.ndarray
    T: int
    regions: tuple = ()
    gap_thresholds: tuple = ()
    checkpoints: Optional[np.ndarray] = None
    pi_floor: float = 0.0
    chunk: int = CHUNK

    def grid(self) -> np.ndarray:
        return checkpoint_grid(self.T + 1) if self.checkpoints is None else np.asarray(self.checkpoints, dtype=int)

    def series_ids(self) -> list[str]:
        ids = [f"region:{r.label}" for r in self.regions]
        ids += [f"gap>={d!r}" for d in self.gap_thresholds]
        return ids


@dataclass
class ChunkResult:
    hits: np.ndarray          # (n_checkpoints, n_series, n_replicas) bool
    diverged_at: np.ndarray
    min_prob: np.ndarray      # running minimum over the whole run
    final_gap: np.ndarray
    first_gap: np.ndarray


def _run_chunk(spec: EnsembleSpec, seeds: Sequence[int]) -> ChunkResult:
    grid = spec.grid()
    pos = {int(t): k for k, t in enumerate(grid)}
    n_series = len(spec.regions) + len(spec.gap_thresholds)
    m = len(seeds)
    hits = np.zeros((len(grid), n_series, m), dtype=bool)
    min_prob = np.full(m, np.inf)
    final_gap = np.zeros(m)
    first_gap = np.zeros(m)
    theta_star = spec.soft.theta_star
    for region in spec.regions:
        if region.kind == "gap-sublevel-complement" and region.hessian is None:
            raise DomainError("gap-sublevel-complement regions in an ensemble must carry the Hessian")
    deltas = np.asarray(spec.gap_thresholds, dtype=float)

    def visit(t, thetas, grads, values, z, alive):
        probs = softmax_batch(thetas)
        np.minimum(min_prob, probs.reshape(m, -1).min(axis=1), out=min_prob)
        if t == 1:
            first_gap[:] = values - spec.soft.value
        if t in pos:
            k = pos[t]
            diff = (thetas - theta_star).reshape(m, -1)
            for j, region in enumerate(spec.regions):
                hits[k, j] = region.contains(diff)
            if deltas.size:
                gaps = values - spec.soft.value
                hits[k, len(spec.regions):] = gaps[None, :] >= deltas[:, None]
        if z is None:
            final_gap[:] = values - spec.soft.value

    noise_fn = None
    if not spec.noise.parameter_free:
        rngs = [np.random.default_rng(s) for s in seeds]
        model = spec.noise

        def noise_fn(t, thetas, grads):
            out = np.empty_like(thetas)
            for i, rng in enumerate(rngs):
                est = trajectory_gradient_estimate(spec.mdp, thetas[i], spec.tau, model.n_rollouts,
                                                   model.horizon, rng)
                out[i] = grads[i] - est
            return out

    diverged = run_batch(spec.mdp, spec.tau, spec.theta_init, spec.schedule, spec.noise, spec.T,
                         seeds, visit, noise_fn=noise_fn)
    return ChunkResult(hits, diverged, min_prob, final_gap, first_gap)


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line through ``(t, log_prob)``; ``rate = -slope``."""

    slope: float
    intercept: float
    stderr: float
    window: tuple
    n_points: int
    residual: float

    @property
    def rate(self) -> float:
        return -self.slope

    def to_dict(self) -> dict:
        return {"slope": self.slope, "rate": self.rate, "intercept": self.intercept,
                "stderr": self.stderr, "window": list(self.window), "n_points": self.n_points,
                "residual": self.residual}


@dataclass(eq=False)
class EnsembleStats:
    """Per-checkpoint hit counts for every monitored series."""

    checkpoints: np.ndarray
    series: list
    counts: np.ndarray           # (n_checkpoints, n_series)
    n_replicas: int
    config_hash: str = ""
    thresholds: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.checkpoints = np.asarray(self.checkpoints)
        self.counts = np.asarray(self.counts)
        if self.counts.shape != (len(self.checkpoints), len(self.series)):
            raise DomainError("counts must have shape (n_checkpoints, n_series)")
        if np.any(self.counts < 0) or np.any(self.counts > self.n_replicas):
            raise DomainError("counts must lie in [0, M]")
        if np.any(np.diff(self.checkpoints) <= 0):
            raise DomainError("checkpoints must be strictly increasing")

    @classmethod
    def from_counts(cls, checkpoints, counts, n_replicas, series_id="series") -> "EnsembleStats":
        counts = np.asarray(counts)
        if counts.ndim == 1:
            counts = counts[:, None]
        series = [series_id] if counts.shape[1] == 1 else [f"{series_id}{j}" for j in range(counts.shape[1])]
        return cls(np.asarray(checkpoints), series, counts, n_replicas)

    @property
    def log_prob(self) -> np.ndarray:
        """Smoothed ``log((count + 1) / (M + 1))``."""
        return np.log((self.counts + 1.0) / (self.n_replicas + 1.0))

    @property
    def frequency(self) -> np.ndarray:
        return self.counts / self.n_replicas

    def column(self, series_id) -> int:
        if isinstance(series_id, int):
            return series_id
        for cand in (series_id, f"region:{series_id}", f"gap>={series_id}"):
            if cand in self.series:
                return self.series.index(cand)
        raise DomainError(f"unknown series {series_id!r}; known: {self.series}")

    def censored(self, series_id) -> np.ndarray:
        return self.counts[:, self.column(series_id)] == 0


def fit_decay_slope(stats: EnsembleStats, series_id, window: float = WINDOW,
                    min_count: int = MIN_COUNT) -> tuple[float, dict]:
    """Empirical decay rate ``-d log P / dt`` by least squares.

    Only checkpoints with at least ``min_count`` hits enter the fit.  The
    windowed fit uses the last ``window`` fraction of them; a fit over all
    valid checkpoints is reported alongside.  Returns ``(rate, diagnostics)``.
    """
    col = stats.column(series_id)
    valid = stats.counts[:, col] >= min_count
    t = stats.checkpoints[valid].astype(float)
    y = stats.log_prob[valid, col]
    if t.size < 4:
        raise EstimationError(f"series {stats.series[col]!r} has {t.size} valid checkpoints; need 4")
    n_win = max(4, int(math.ceil(window * t.size)))
    windowed = _ols(t[-n_win:], y[-n_win:])
    full = _ols(t, y)
    return windowed.rate, {"windowed": windowed, "full": full, "series": stats.series[col]}


def _ols(t, y) -> SlopeFit:
    res = sps.linregress(t, y)
    resid = y - (res.intercept + res.slope * t)
    stderr = float(res.stderr) if np.isfinite(res.stderr) else 0.0
    return SlopeFit(float(res.slope), float(res.intercept), stderr, (float(t[0]), float(t[-1])),
                    int(t.size), float(np.linalg.norm(resid)))


def clopper_pearson(count, n, alpha: float):
    """One-sided ``1 - alpha`` Clopper-Pearson limits ``(lower, upper)``."""
    count = np.asarray(count, dtype=float)
    lower = np.where(count > 0, sps.beta.ppf(alpha, count, n - count + 1), 0.0)
    upper = np.where(count < n, sps.beta.ppf(1 - alpha, count + 1, n - count), 1.0)
    return lower, upper


def run_ensemble(spec: EnsembleSpec, M: int, base_seed: int, *, workers: Optional[int] = None,
                 config_hash: str = "", max_divergent: float = 0.01) -> EnsembleStats:
    """Run ``M`` replicas and count checkpoint membership for every series."""
    if M < 1:
        raise DomainError("M must be positive")
    workers = default_workers() if workers is None else int(workers)
    if workers < 1:
        raise DomainError("workers must be at least 1")
    seeds = [base_seed + i for i in range(M)]
    chunks = [seeds[i:i + spec.chunk] for i in range(0, M, spec.chunk)]
    if workers == 1 or len(chunks) == 1:
        results = [_run_chunk(spec, c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
            results = list(pool.map(_run_chunk, [spec] * len(chunks), chunks))

    hits = np.concatenate([r.hits for r in results], axis=2)
    diverged_at = np.concatenate([r.diverged_at for r in results])
    min_prob = np.concatenate([r.min_prob for r in results])
    first_gap = np.concatenate([r.first_gap for r in results])
    ok = diverged_at == 0
    n_ok = int(ok.sum())
    counts = hits[:, :, ok].sum(axis=2)
    divergent = M - n_ok
    conditioning = (min_prob[ok] >= spec.pi_floor) if spec.pi_floor > 0 else np.ones(n_ok, dtype=bool)
    manifest = {
        "base_seed": base_seed,
        "M": M,
        "chunk": spec.chunk,
        "config_hash": config_hash,
        "n_ok": n_ok,
        "n_diverged": divergent,
        "flagged": bool(divergent > max_divergent * M),
        "status": ["ok" if d == 0 else f"diverged@{int(d)}" for d in diverged_at],
        "gap1": float(first_gap[0]) if M else float("nan"),
        "pi_floor": spec.pi_floor,
        "min_action_prob": float(min_prob[ok].min()) if n_ok else float("nan"),
        "conditioning_frequency": float(conditioning.mean()) if n_ok else float("nan"),
    }
    thresholds = {f"gap>={d!r}": float(d) for d in spec.gap_thresholds}
    return EnsembleStats(spec.grid(), spec.series_ids(), counts, n_ok, config_hash, thresholds, manifest)


@dataclass
class CompareReport:
    bound_rows: list
    region_rows: list
    n_bound_violations: int
    n_region_violations: int
    alpha: float

    @property
    def passed(self) -> bool:
        return self.n_bound_violations == 0 and self.n_region_violations == 0

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "n_bound_violations": self.n_bound_violations,
                "n_region_violations": self.n_region_violations, "passed": self.passed,
                "bounds": self.bound_rows, "regions": self.region_rows}


def compare_bounds(stats: EnsembleStats, constants: Optional[TheoryConstants],
                   rate_fn: Optional[RateFunction], regions: Sequence[RegionSpec] = (), *,
                   alpha: float = 1e-3, z: float = 3.0, expected_hash: Optional[str] = None,
                   window: float = WINDOW, min_count: int = MIN_COUNT) -> CompareReport:
    """Check tail frequencies against the exponential bound and fitted rates against region rates.

    A bound violation needs the one-sided Clopper-Pearson lower limit of the
    frequency to exceed the bound.  A region violation means the fitted
    decay rate falls below the theoretical rate by more than ``z`` standard
    errors.
    """
    if expected_hash is not None and stats.config_hash != expected_hash:
        raise ConfigError(f"config hash mismatch: stats {stats.config_hash!r}, expected {expected_hash!r}")
    bound_rows, region_rows = [], []
    n_bad = 0
    if constants is not None:
        for sid, delta in stats.thresholds.items():
            col = stats.column(sid)
            counts = stats.counts[:, col]
            lower, upper = clopper_pearson(counts, stats.n_replicas, alpha)
            for k, t in enumerate(stats.checkpoints):
                bound = exp_bound(constants, int(t), delta)
                bad = bool(lower[k] > bound)
                n_bad += bad
                bound_rows.append({
                    "series": sid, "t": int(t), "delta": delta, "count": int(counts[k]),
                    "M": stats.n_replicas, "frequency": float(counts[k] / stats.n_replicas),
                    "cp_lower": float(lower[k]), "cp_upper": float(upper[k]), "bound": bound,
                    "bound_raw": float(exp_bound_exponent(constants, int(t), delta)), "violation": bad,
                })
    n_region_bad = 0
    for region in regions:
        sid = f"region:{region.label}"
        row = {"series": sid, "region": region.to_dict()}
        r_theory = region_rate(region, rate_fn).value if rate_fn is not None else float("nan")
        row["rate_theory"] = r_theory
        try:
            r_hat, diag = fit_decay_slope(stats, sid, window, min_count)
        except EstimationError as exc:
            row.update(rate_empirical=None, note=str(exc), violation=False)
            region_rows.append(row)
            continue
        fit = diag["windowed"]
        margin = r_hat - r_theory
        bad = bool(margin < -z * fit.stderr)
        n_region_bad += bad
        row.update(rate_empirical=r_hat, stderr=fit.stderr, margin=margin, violation=bad,
                   fit=fit.to_dict(), fit_full=diag["full"].to_dict())
        region_rows.append(row)
    return CompareReport(bound_rows, region_rows, n_bad, n_region_bad, alpha)


def write_checkpoint_table(stats: EnsembleStats, path, constants: Optional[TheoryConstants] = None,
                           header_comments=()) -> None:
    """Long-format table ``t, region_id, count, M, log_prob, bound, bound_raw``."""
    with open(path, "w", newline="") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "region_id", "count", "M", "log_prob", "bound", "bound_raw"])
        logp = stats.log_prob
        for j, sid in enumerate(stats.series):
            delta = stats.thresholds.get(sid)
            for k, t in enumerate(stats.checkpoints):
                bound = bound_raw = ""
                if constants is not None and delta is not None:
                    bound = repr(exp_bound(constants, int(t), delta))
                    bound_raw = repr(float(exp_bound_exponent(constants, int(t), delta)))
                writer.writerow([int(t), sid, int(stats.counts[k, j]), stats.n_replicas,
                                 repr(float(logp[k, j])), bound, bound_raw])


def stats_summary(stats: EnsembleStats) -> dict:
    fits = {}
    for sid in stats.series:
        try:
            _, diag = fit_decay_slope(stats, sid)
            fits[sid] = {"windowed": diag["windowed"].to_dict(), "full": diag["full"].to_dict()}
        except EstimationError as exc:
            fits[sid] = {"censored": bool(np.all(stats.censored(sid))), "note": str(exc)}
    manifest = {k: v for k, v in stats.manifest.items() if k != "status"}
    return {"config_hash": stats.config_hash, "M": stats.n_replicas, "series": stats.series,
            "checkpoints": stats.checkpoints.tolist(), "slope_fits": fits, "manifest": manifest}


def write_json(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
