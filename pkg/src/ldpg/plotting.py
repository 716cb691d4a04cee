"""Figures for the CLI reports (Agg backend, byte-stable PNG output)."""

from __future__ import annotations

from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .montecarlo import CompareReport, EnsembleStats  # noqa: E402
from .optimizer import Trajectory  # noqa: E402
from .theory import TheoryConstants, exp_bound_exponent  # noqa: E402

# without a Software entry the PNG bytes depend only on the drawing
_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_METADATA)
    plt.close(fig)


def plot_decay(stats: EnsembleStats, path, constants: Optional[TheoryConstants] = None,
               report: Optional[CompareReport] = None) -> None:
    """Log tail frequency against ``t`` for every series, with bounds and fitted rates."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    t = stats.checkpoints
    logp = stats.log_prob
    for j, sid in enumerate(stats.series):
        line, = ax.plot(t, logp[:, j], marker="o", ms=3, lw=1, label=sid)
        delta = stats.thresholds.get(sid)
        if constants is not None and delta is not None:
            bound = np.minimum(exp_bound_exponent(constants, t, delta), 0.0)
            ax.plot(t, bound, ls="--", color=line.get_color(), lw=1)
    if report is not None:
        for row in report.region_rows:
            fit = row.get("fit")
            if not fit:
                continue
            tt = np.asarray(t, dtype=float)
            ax.plot(tt, fit["intercept"] - row["rate_theory"] * tt, ls=":", color="k", lw=1)
    ax.set_xlabel("t")
    ax.set_ylabel("log frequency")
    ax.set_title(f"tail frequencies (M={stats.n_replicas})")
    ax.legend(fontsize=7, loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_trajectory(traj: Trajectory, path) -> None:
    """Value gap and distance to the optimum along one run, log scale."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    t = np.arange(1, len(traj.gaps) + 1)
    ax1.loglog(t, np.maximum(traj.gaps, 1e-300), lw=1)
    ax1.set_ylabel("value gap")
    ax2.loglog(t, np.maximum(traj.distances(), 1e-300), lw=1, color="C1")
    ax2.set_ylabel("|theta - theta*|")
    ax2.set_xlabel("t")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3, which="both")
    fig.tight_layout()
    _save(fig, path)


def plot_bound(constants: TheoryConstants, deltas, T: int, path) -> None:
    """Exponent of the tail bound, capped at zero, for each threshold."""
    fig, ax = plt.subplots(figsize=(7, 4))
    t = np.arange(1, T + 1)
    for d in deltas:
        ax.plot(t, np.minimum(exp_bound_exponent(constants, t, d), 0.0), lw=1, label=f"delta={d:.3g}")
    ax.set_xlabel("t")
    ax.set_ylabel("log bound")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
