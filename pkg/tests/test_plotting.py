import numpy as np

from ldpg.montecarlo import EnsembleStats, checkpoint_grid
from ldpg.optimizer import StepSchedule, sgd_run
from ldpg.noise import NoiseModel
from ldpg.plotting import plot_bound, plot_decay, plot_trajectory
from ldpg.theory import lemma5_constants

from conftest import TAU


def _constants():
    return lemma5_constants(4.0, 0.36, 0.01, 2.0, 5.85, 0.1, 0.05, 300, 0.0035, 4)


def test_plots_are_written_and_deterministic(tmp_path, two_state, two_state_soft):
    t = checkpoint_grid(300)
    counts = np.stack([np.maximum(0, 1000 - 10 * t), np.maximum(0, 1000 - 20 * t)], axis=1)
    stats = EnsembleStats(t, ["gap>=0.001", "region:x"], counts, 1000, "h", {"gap>=0.001": 0.001})
    traj = sgd_run(two_state, TAU, two_state_soft.theta_star + 0.01, StepSchedule(5.0, 100),
                   NoiseModel("gaussian-isotropic", 0.01), 50, 0, soft=two_state_soft)
    for name in ("a", "b"):
        plot_decay(stats, tmp_path / f"decay_{name}.png", _constants())
        plot_trajectory(traj, tmp_path / f"traj_{name}.png")
        plot_bound(_constants(), [0.001, 0.0005], 300, tmp_path / f"bound_{name}.png")
    for stem in ("decay", "traj", "bound"):
        a, b = (tmp_path / f"{stem}_a.png").read_bytes(), (tmp_path / f"{stem}_b.png").read_bytes()
        assert a[:8] == b"\x89PNG\r\n\x1a\n"
        assert a == b
