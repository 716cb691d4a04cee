from pathlib import Path

import numpy as np
import pytest

from ldpg.mdp import Mdp, soft_optimal

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

TRANSITION = [[[0.8, 0.2], [0.3, 0.7]], [[0.4, 0.6], [0.9, 0.1]]]
COST = [[0.2, 1.0], [0.7, 0.0]]
TAU = 5.0


@pytest.fixture(scope="session")
def two_state():
    return Mdp(np.array(TRANSITION), np.array(COST), 0.5, np.array([0.5, 0.5]))


@pytest.fixture(scope="session")
def two_state_soft(two_state):
    return soft_optimal(two_state, TAU)


def one_state_mdp(costs, discount):
    costs = np.asarray(costs, dtype=float)[None, :]
    transition = np.ones((1, costs.shape[1], 1))
    return Mdp(transition, costs, discount, np.ones(1))
