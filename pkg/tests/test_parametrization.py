import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldpg.errors import DomainError
from ldpg.parametrization import (ParamMap, componentwise_exp_map, escort_policy, identity_map,
                                  map_from_spec, register_map, scale_map, softmax_policy,
                                  softmax_to_escort_map)

finite = st.floats(-30, 30, allow_nan=False)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_policy(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax_policy(np.array([[math.log(3.0), 0.0]])), [[0.75, 0.25]])


@settings(max_examples=50, deadline=None)
@given(theta=arrays(float, (3, 4), elements=finite), shift=arrays(float, (3, 1), elements=finite))
def test_softmax_rows_and_shift_invariance(theta, shift):
    pi = softmax_policy(theta)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(pi > 0)
    np.testing.assert_allclose(softmax_policy(theta + shift), pi, atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DomainError):
        softmax_policy(np.array([[np.nan, 0.0]]))


def test_escort_examples():
    np.testing.assert_allclose(escort_policy(np.array([[1.0, 1.0]]), 2), [[0.5, 0.5]])
    np.testing.assert_allclose(escort_policy(np.array([[2.0, 1.0]]), 2), [[0.8, 0.2]])
    np.testing.assert_allclose(escort_policy(np.array([[-7.5, -7.5, -7.5]]), 3), [[1 / 3] * 3])


def test_escort_errors():
    with pytest.raises(DomainError):
        escort_policy(np.array([[0.0, 0.0], [1.0, 2.0]]), 2)
    with pytest.raises(DomainError):
        escort_policy(np.array([[1.0, 2.0]]), 0.5)


@settings(max_examples=50, deadline=None)
@given(w=arrays(float, (2, 3), elements=st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-6)),
       p=st.floats(1.0, 6.0))
def test_escort_rows_valid(w, p):
    pi = escort_policy(w, p)
    assert np.all(pi >= 0)
    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)


def test_escort_map_examples():
    f = softmax_to_escort_map(2)
    np.testing.assert_allclose(f(np.zeros(4)), np.ones(4))
    np.testing.assert_allclose(f(np.full(4, 2 * math.log(3))), np.full(4, 3.0))
    with pytest.raises(DomainError):
        f.inverse(np.array([1.0, -1.0]))


@pytest.mark.parametrize("p", [1.0, 2.0, 3.5])
def test_escort_map_reproduces_softmax(p):
    rng = np.random.default_rng(0)
    f = softmax_to_escort_map(p)
    for _ in range(100):
        theta = rng.normal(scale=3.0, size=(3, 4))
        w = f(theta.reshape(-1)).reshape(3, 4)
        np.testing.assert_allclose(escort_policy(w, p), softmax_policy(theta), atol=1e-9)


@pytest.mark.parametrize("spec", ["identity", "scale:2.5", "scale:-0.3", "escort:2", "componentwise-exp:1.5"])
def test_registered_maps_round_trip(spec):
    pmap = map_from_spec(spec)
    rng = np.random.default_rng(1)
    for u in rng.normal(size=(1000, 4)):
        w = pmap(u)
        assert pmap.contains(w)
        np.testing.assert_allclose(pmap.forward(pmap.inverse(w)), w, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(pmap.inverse(w), u, rtol=1e-9, atol=1e-9)


def test_map_spec_errors():
    with pytest.raises(DomainError):
        map_from_spec("nonsense")
    with pytest.raises(DomainError):
        map_from_spec("scale")
    with pytest.raises(DomainError):
        map_from_spec("scale:0")
    with pytest.raises(DomainError):
        map_from_spec("escort:0.5")


def test_composition_and_registration():
    comp = scale_map(2.0).then(componentwise_exp_map(2.0))
    u = np.array([0.3, -0.2])
    np.testing.assert_allclose(comp(u), np.exp(u))
    np.testing.assert_allclose(comp.inverse(comp(u)), u)
    assert not comp.contains(np.array([1.0, -1.0]))

    register_map("square", lambda arg: ParamMap("square", lambda v: np.asarray(v) ** 2))
    sq = map_from_spec("square")
    assert not sq.invertible
    np.testing.assert_allclose(sq(np.array([-2.0])), [4.0])
    with pytest.raises(ValueError):
        register_map("bad:name", lambda arg: identity_map())
