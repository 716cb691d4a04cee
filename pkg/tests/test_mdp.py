import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from conftest import TAU, one_state_mdp
from ldpg.checks import bellman_residual, fd_gradient
from ldpg.errors import DomainError
from ldpg.mdp import (Mdp, exact_gradient, gradient_batch, hessian, policy_value, random_mdp,
                      shift_directions, soft_advantage, soft_optimal, validate_mdp, value, values_batch,
                      visitation)
from ldpg.parametrization import softmax_policy

# Reference optimum of the bundled two-state MDP at tau = 5, found by direct
# Nelder-Mead minimisation of rho . V over theta (no value iteration involved).
REF_VALUE = -5.981990977366943
REF_V = [-5.864586674997716, -6.099395279736169]
REF_PI_ROW0 = 0.536997155029031
REF_PI_ROW1 = 0.467978994063226


def test_soft_optimum_matches_direct_minimisation(two_state, two_state_soft):
    assert two_state_soft.value == pytest.approx(REF_VALUE, abs=1e-9)
    np.testing.assert_allclose(two_state_soft.v_star, REF_V, atol=1e-9)
    assert two_state_soft.pi_star[0, 0] == pytest.approx(REF_PI_ROW0, abs=1e-7)
    assert two_state_soft.pi_star[1, 0] == pytest.approx(REF_PI_ROW1, abs=1e-7)


def test_soft_optimum_contract(two_state, two_state_soft):
    s = two_state_soft
    assert s.bellman_residual < 1e-10
    assert bellman_residual(two_state, TAU, s) < 1e-10
    assert np.max(np.abs(exact_gradient(two_state, s.theta_star, TAU))) < 1e-8
    assert np.max(np.abs(soft_advantage(two_state, s.theta_star, TAU))) < 1e-8
    np.testing.assert_allclose(s.theta_star, -s.q_star / TAU)


@settings(max_examples=30, deadline=None)
@given(costs=st.lists(st.floats(-3, 3), min_size=1, max_size=5), discount=st.floats(0.05, 0.95),
       tau=st.floats(0.05, 5.0))
def test_single_state_closed_form(costs, discount, tau):
    mdp = one_state_mdp(costs, discount)
    sol = soft_optimal(mdp, tau)
    c = np.asarray(costs)
    expected = -tau * logsumexp(-c / tau) / (1.0 - discount)
    assert sol.value == pytest.approx(expected, rel=1e-10, abs=1e-10)
    np.testing.assert_allclose(sol.pi_star[0], np.exp(-c / tau - logsumexp(-c / tau)), atol=1e-10)


def test_policy_value_uniform_no_regularisation():
    # one state, two actions, cost 1 and 3, uniform policy: V = 2 / (1 - gamma)
    mdp = one_state_mdp([1.0, 3.0], 0.5)
    v, q, val = policy_value(mdp, np.array([[0.5, 0.5]]), 0.0)
    assert val == pytest.approx(4.0)
    np.testing.assert_allclose(q, [[3.0, 5.0]])


def test_policy_value_rejects_bad_policy(two_state):
    with pytest.raises(DomainError):
        policy_value(two_state, np.array([[1.0, 0.0], [0.5, 0.5]]), 0.1)
    with pytest.raises(DomainError):
        policy_value(two_state, np.array([[0.6, 0.6], [0.5, 0.5]]), 0.0)
    with pytest.raises(DomainError):
        value(two_state, np.zeros((2, 2)), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(3, 4, 0.9, seed)
    theta = rng.standard_normal((3, 4))
    g = exact_gradient(mdp, theta, 0.3)
    fd = fd_gradient(mdp, theta, 0.3)
    assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-6


def test_gradient_batch_agrees_with_single(two_state):
    rng = np.random.default_rng(1)
    thetas = rng.standard_normal((6, 2, 2))
    grads, vals = gradient_batch(two_state, thetas, TAU)
    for th, g, v in zip(thetas, grads, vals):
        np.testing.assert_allclose(g, exact_gradient(two_state, th, TAU), atol=1e-12)
        assert v == pytest.approx(value(two_state, th, TAU), abs=1e-12)
    np.testing.assert_allclose(values_batch(two_state, thetas, TAU), vals, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-5, 5))
def test_row_shift_invariance(seed, shift):
    mdp = random_mdp(3, 2, 0.8, seed)
    theta = np.random.default_rng(seed).standard_normal((3, 2))
    moved = theta + shift * np.array([[1.0], [0.0], [1.0]])
    assert value(mdp, moved, 0.5) == pytest.approx(value(mdp, theta, 0.5), abs=1e-10)
    g = exact_gradient(mdp, theta, 0.5)
    # the gradient is orthogonal to every shift direction
    assert np.max(np.abs(shift_directions(3, 2) @ g.reshape(-1))) < 1e-12


def test_hessian_symmetric_with_shift_null_space(two_state, two_state_soft):
    h = hessian(two_state, two_state_soft.theta_star, TAU)
    np.testing.assert_allclose(h, h.T, atol=1e-14)
    u = shift_directions(2, 2)
    assert np.max(np.abs(h @ u.T)) < 1e-8
    eigs = np.linalg.eigvalsh(h)
    assert np.sum(np.abs(eigs) < 1e-8) == 2
    assert np.all(eigs[np.abs(eigs) >= 1e-8] > 0)


def test_visitation_is_distribution(two_state):
    d = visitation(two_state, softmax_policy(np.zeros((2, 2))))
    assert d.sum() == pytest.approx(1.0)
    assert np.all(d > 0)


def test_validate_mdp_collects_all_issues():
    p = np.array([[[0.5, 0.6], [1.0, 0.0]], [[-0.1, 1.1], [0.5, 0.5]]])
    c = np.array([[0.0, np.inf], [0.0, 0.0]])
    report = validate_mdp(Mdp(p, c, 1.0, np.array([0.5, 0.5])))
    assert not report.ok
    for inv in ("row_sum", "nonnegative", "finite_cost"):
        assert report.failed(inv)
    assert len(report.issues) >= 4


def test_mdp_json_round_trip(tmp_path, two_state):
    path = tmp_path / "m.json"
    two_state.save(path)
    doc = json.loads(path.read_text())
    assert doc["n_states"] == 2 and doc["n_actions"] == 2
    again = Mdp.load(path)
    np.testing.assert_array_equal(again.transition, two_state.transition)
    assert again.discount == two_state.discount


def test_mdp_json_shape_mismatch():
    doc = {"n_states": 3, "n_actions": 2, "transition": [[[1.0]]], "cost": [[0.0]], "discount": 0.5,
           "init_dist": [1.0]}
    with pytest.raises(DomainError):
        Mdp.from_dict(doc)


def test_random_mdp_is_seeded_and_valid():
    a, b = random_mdp(4, 3, 0.9, 11), random_mdp(4, 3, 0.9, 11)
    np.testing.assert_array_equal(a.transition, b.transition)
    assert validate_mdp(a).ok
    assert a.init_dist.min() >= 0.05 / 4 - 1e-15


def test_tau_must_be_positive(two_state):
    with pytest.raises(DomainError):
        soft_optimal(two_state, 0.0)
    with pytest.raises(DomainError):
        exact_gradient(two_state, np.zeros((2, 2)), -1.0)
