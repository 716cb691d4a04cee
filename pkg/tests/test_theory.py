import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TAU
from ldpg.errors import DomainError, InfeasibleError
from ldpg.noise import NoiseModel
from ldpg.optimizer import StepSchedule, sgd_run
from ldpg.parametrization import softmax_policy
from ldpg.theory import (FEASIBILITY, auto_eta, check_recursion, estimate_l1, exp_bound, exp_bound_exponent,
                         lemma5_constants, pl_constant, pl_prefactor, spectral_norm)

BASE = dict(l1=4.16, mu=0.363, sigma=0.01, c_universal=2.0, epsilon=0.1, delta_init=0.05, T=2000,
            gap1=0.0035, dim=4)


def constants(**kw):
    args = dict(BASE)
    args.update(kw)
    if "eta" not in args:
        args["eta"] = auto_eta(args["mu"], args["sigma"], args["c_universal"], args["dim"], 1.0)
    return lemma5_constants(**args)


def test_spectral_norm_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    a = a + a.T
    assert spectral_norm(a) == pytest.approx(np.max(np.abs(np.linalg.eigvalsh(a))), rel=1e-7)


def test_estimate_l1_on_a_quadratic():
    h = np.diag([3.0, -5.0, 1.0])
    l1 = estimate_l1(None, 1.0, 10, 0.5, hessian_fn=lambda th: h, center=np.zeros(3))
    assert l1 == pytest.approx(1.5 * 5.0, rel=1e-7)
    assert estimate_l1(None, 1.0, 1, 1.0, override=12.0) == 12.0
    with pytest.raises(DomainError):
        estimate_l1(None, 1.0, 1, 1.0, override=-1.0)


def test_pl_constant_formula(two_state, two_state_soft):
    theta = np.array([[0.3, -0.2], [1.0, 0.1]])
    expected = pl_prefactor(two_state, TAU, two_state_soft) * softmax_policy(theta).min() ** 2
    assert pl_constant(two_state, theta, TAU, two_state_soft) == pytest.approx(expected)
    l1 = estimate_l1(two_state, TAU, 20, 0.1, soft=two_state_soft)
    assert pl_constant(two_state, two_state_soft.theta_star, TAU, two_state_soft) <= l1


def test_constants_satisfy_every_requirement():
    k = constants()
    # step-size and warm-start lower bounds on t0
    margin = (k.mu * k.eta - 1.0) - k.b0 * k.c0 * k.eta ** 2
    assert margin > 0
    assert k.t0 >= k.eta ** 2 * k.l1 / margin - 1.0
    assert k.t0 >= k.l1 * k.eta - 2.0
    assert k.t0 >= math.sqrt(3 * k.sigma ** 2 / (2 * k.epsilon * k.delta_init)) - 1.0
    assert k.eta / (1 + k.t0 + 1) <= 1.0 / k.l1
    ts = np.arange(1, k.horizon + 1)
    contraction = k.contraction(ts)
    assert np.all((contraction >= 0) & (contraction < 1))
    assert k.k_const >= 1.0 / k.b0
    assert k.k_const >= (k.t0 + 1) * k.gap1
    assert np.all(k.k_const >= k.k_third_term(ts))
    assert k.c_m == pytest.approx((0.01 * 2.0 * 2.0) ** 2)
    assert k.b0 == pytest.approx(1.0 / (2 * k.eta ** 2 * k.l1 * k.c_m))
    assert k.c0 == pytest.approx(2 * k.l1 * k.sigma ** 2)
    assert k.mu <= k.l1


def test_t0_is_smallest():
    from ldpg.theory import TheoryConstants

    k = constants()
    probe = TheoryConstants(k.l1, k.mu, k.sigma, k.c_universal, k.dim, k.eta, k.t0 - 1, 1.0,
                            k.epsilon, k.delta_init, k.gap1, k.horizon)
    assert any(v > k.t0 - 1 for v in k.t0_bounds.values()) or probe.contraction(1) >= 1.0


def test_infeasible_boundary():
    mu, sigma, c, d = 0.5, 0.1, 2.0, 4
    ratio = sigma ** 2 / (sigma * math.sqrt(d) * c) ** 2
    with pytest.raises(InfeasibleError) as info:
        lemma5_constants(10.0, mu, sigma, c, (1.0 + ratio) / mu, 0.1, 0.1, 100, 0.01, d)
    assert info.value.constraint == FEASIBILITY
    with pytest.raises(InfeasibleError):
        lemma5_constants(10.0, mu, sigma, c, 1.0, 0.1, 0.1, 100, 0.01, d)
    lemma5_constants(10.0, mu, sigma, c, 1.01 * (1.0 + ratio) / mu, 0.1, 0.1, 100, 0.01, d)


def test_input_errors():
    with pytest.raises(DomainError):
        constants(mu=5.0, l1=4.0)
    with pytest.raises(DomainError):
        constants(epsilon=1.0)
    with pytest.raises(DomainError):
        constants(delta_init=0.0)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(1.0, 5.0), factor=st.floats(1.0, 4.0))
def test_noise_terms_of_k_non_decreasing_in_c(c, factor):
    # A larger C can lower t0 and with it the (t0+1)*gap1 term, so K itself is
    # not monotone in general; the two noise-driven terms are, at fixed t0.
    from ldpg.theory import TheoryConstants

    eta = auto_eta(BASE["mu"], BASE["sigma"], 1.0, BASE["dim"], 1.0)
    a = constants(c_universal=c, eta=eta)
    ts = np.arange(1, a.horizon + 1)
    probe = TheoryConstants(a.l1, a.mu, a.sigma, c * factor, a.dim, eta, a.t0, 1.0, a.epsilon,
                            a.delta_init, a.gap1, a.horizon)
    assert 1.0 / probe.b0 >= 1.0 / a.b0 * (1 - 1e-12)
    assert np.all(probe.k_third_term(ts) >= a.k_third_term(ts) * (1 - 1e-12))


def test_k_can_drop_when_c_grows():
    eta = auto_eta(BASE["mu"], BASE["sigma"], 1.0, BASE["dim"], 1.0)
    a = constants(c_universal=1.0, eta=eta)
    b = constants(c_universal=1.5, eta=eta)
    assert b.t0 < a.t0 and b.k_const < a.k_const


@settings(max_examples=200, deadline=None)
@given(mu=st.floats(1e-3, 10.0), l1=st.floats(1e-3, 10.0), frac=st.floats(1e-6, 1.0))
def test_one_step_factor_in_unit_interval(mu, l1, frac):
    mu = min(mu, l1)
    eta_t = frac / l1
    factor = 1.0 - mu * eta_t + mu * eta_t ** 2 * l1
    assert 0 < factor <= 1.0 + 1e-15


def test_exp_bound_clamped():
    k = constants()
    assert exp_bound(k, 1, 0.0) == 1.0
    vals = exp_bound(k, np.array([1, 100, 10_000]), 0.01)
    assert np.all((vals >= 0) & (vals <= 1))
    raw = exp_bound_exponent(k, 10_000, 0.01)
    assert raw == pytest.approx(1 - (10_000 + k.t0 + 1) * 0.01 / k.k_const)
    with pytest.raises(DomainError):
        exp_bound(k, 0, 0.1)


def test_check_recursion_noiseless_and_noisy(two_state, two_state_soft):
    l1 = estimate_l1(two_state, TAU, 20, 0.5, soft=two_state_soft)
    k = constants(l1=l1)
    start = two_state_soft.theta_star + 0.05
    for sigma in (0.0, 0.05):
        traj = sgd_run(two_state, TAU, start, k.schedule, NoiseModel("gaussian-isotropic", sigma), 500, 3,
                       soft=two_state_soft)
        rep = check_recursion(traj, k, two_state, TAU, two_state_soft)
        assert rep.passed, rep.first_violation()


def test_check_recursion_detects_tampering(two_state, two_state_soft):
    l1 = estimate_l1(two_state, TAU, 20, 0.5, soft=two_state_soft)
    k = constants(l1=l1)
    traj = sgd_run(two_state, TAU, two_state_soft.theta_star + 0.05, k.schedule,
                   NoiseModel("gaussian-isotropic", 0.05), 100, 3, soft=two_state_soft)
    gaps = traj.gaps.copy()
    gaps[50] += 1.0
    rep = check_recursion(traj.with_gaps(gaps), k, two_state, TAU, two_state_soft)
    assert not rep.passed
    assert rep.first_violation() == (51, "gap")


def test_check_recursion_flags_large_steps(two_state, two_state_soft):
    k = constants(l1=4.0)
    traj = sgd_run(two_state, TAU, two_state_soft.theta_star, StepSchedule(10.0, 0),
                   NoiseModel("gaussian-isotropic", 0.0), 5, 0, soft=two_state_soft)
    assert not check_recursion(traj, k, two_state, TAU, two_state_soft).step_ok
