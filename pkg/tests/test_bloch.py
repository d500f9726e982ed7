import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hamid.bloch import (
    NORM_TOLERANCE,
    BlochVector,
    DecoherenceRates,
    DegenerateSteadyStateError,
    HamiltonianParams,
    build_generator,
    closed_evolution_z,
    decay_difference,
    propagate,
    steady_state,
)

from oracles import superop_propagate, superop_steady_state

rates_st = st.tuples(*[st.floats(0.0, 2.0)] * 3)
angle_st = st.floats(0.0, math.pi)


def test_params_validation():
    with pytest.raises(ValueError):
        HamiltonianParams(-1.0, 0.5)
    with pytest.raises(ValueError):
        HamiltonianParams(1.0, 4.0)
    with pytest.raises(ValueError):
        DecoherenceRates(gamma_z=-0.1)
    assert DecoherenceRates().is_zero
    h = HamiltonianParams(1.0, 1.0)
    assert h.sigma_x == pytest.approx(0.5 * math.sin(1.0))
    assert h.sigma_z == pytest.approx(0.5 * math.cos(1.0))


@pytest.mark.parametrize("d, theta, t, expected", [
    (1.0, math.pi / 2, math.pi, -1.0),
    (5.0, 0.0, 7.3, 1.0),
    (2.0, math.pi / 4, math.pi / 2, 0.0),
])
def test_closed_evolution_examples(d, theta, t, expected):
    assert closed_evolution_z(HamiltonianParams(d, theta), t) == pytest.approx(expected, abs=1e-15)


def test_closed_evolution_oscillates_at_d():
    h = HamiltonianParams(1.7, 1.1)
    period = 2 * math.pi / h.d
    for t in (0.3, 1.9, 4.4):
        assert closed_evolution_z(h, t + period) == pytest.approx(closed_evolution_z(h, t), abs=1e-12)


def test_generator_pure_dephasing_example():
    gen = build_generator(HamiltonianParams(1.0, math.pi / 2), DecoherenceRates(0.1))
    expected = [[-0.2, 0, 0], [0, -0.2, 1], [0, -1, 0]]
    np.testing.assert_allclose(gen.linear_part, expected, atol=1e-15)
    np.testing.assert_array_equal(gen.constant_part, 0.0)


@given(st.floats(0.0, 3.0), angle_st)
def test_generator_unitary_limit_is_antisymmetric(d, theta):
    gen = build_generator(HamiltonianParams(d, theta), DecoherenceRates())
    np.testing.assert_allclose(gen.linear_part, -gen.linear_part.T, atol=1e-15)
    np.testing.assert_array_equal(gen.constant_part, 0.0)


def test_generator_population_relaxation():
    gen = build_generator(HamiltonianParams(0.0, 0.0), DecoherenceRates(0.0, 1.0, 5.0))
    assert gen.linear_part[2, 2] == -6.0
    assert gen.constant_part[2] == -4.0
    assert steady_state(HamiltonianParams(0.0, 0.0), DecoherenceRates(0, 1, 5)).z == pytest.approx(-2 / 3)


def test_propagate_example():
    z = propagate(HamiltonianParams(1.0, math.pi / 2), DecoherenceRates(), (0, 0, 1), math.pi, 2)[:, 2]
    np.testing.assert_allclose(z, [1.0, -1.0], atol=1e-12)


@given(st.floats(0.1, 3.0), angle_st)
def test_propagate_matches_closed_form(d, theta):
    h = HamiltonianParams(d, theta)
    traj = propagate(h, DecoherenceRates(), BlochVector(0, 0, 1), 0.037, 400)
    expected = [closed_evolution_z(h, k * 0.037) for k in range(400)]
    np.testing.assert_allclose(traj[:, 2], expected, atol=1e-10)


def test_propagate_rejects_bad_input():
    h, r = HamiltonianParams(1.0, 1.0), DecoherenceRates()
    with pytest.raises(ValueError):
        propagate(h, r, (0, 0, 1), 0.0, 10)
    with pytest.raises(ValueError):
        propagate(h, r, (0, 0, 1), math.nan, 10)
    with pytest.raises(ValueError):
        propagate(h, r, (0, math.inf, 1), 0.1, 10)
    with pytest.raises(ValueError):
        propagate(h, r, (0, 0, 1), 0.1, 0)


def test_propagate_matches_superoperator_example():
    traj = propagate(HamiltonianParams(1.0, math.pi / 2), DecoherenceRates(0.1), (0, 0, 1), 0.05, 500)
    ref = superop_propagate(1.0, math.pi / 2, (0.1, 0, 0), (0, 0, 1), 0.05, 500)
    np.testing.assert_allclose(traj, ref, atol=1e-8)


@given(st.floats(0.0, 2.0), angle_st, rates_st, st.floats(0.01, 0.5))
def test_propagate_matches_superoperator(d, theta, rates, dt):
    init = (0.3, -0.2, 0.8)
    traj = propagate(HamiltonianParams(d, theta), DecoherenceRates(*rates), init, dt, 60)
    ref = superop_propagate(d, theta, rates, init, dt, 60)
    np.testing.assert_allclose(traj, ref, atol=1e-8)


def test_strong_dephasing_decays_to_mixed_state():
    traj = propagate(HamiltonianParams(1.0, math.pi / 4), DecoherenceRates(0.5), (0, 0, 1), 0.05, 4000)
    z = traj[:, 2]
    assert abs(z[-1]) < 1e-3
    assert np.all(z > -1e-12)  # decays without changing sign


@given(st.floats(0.0, 2.0), angle_st, rates_st)
def test_trajectory_stays_in_unit_ball(d, theta, rates):
    traj = propagate(HamiltonianParams(d, theta), DecoherenceRates(*rates), (0.6, 0.0, 0.8), 0.1, 300)
    assert np.all(np.linalg.norm(traj, axis=1) <= 1.0 + NORM_TOLERANCE)


def test_unitary_norm_conserved():
    traj = propagate(HamiltonianParams(1.3, 0.7), DecoherenceRates(), (0.6, 0.0, 0.8), 0.01, 10_000)
    np.testing.assert_allclose(np.linalg.norm(traj, axis=1), 1.0, atol=1e-10)


def test_steady_state_is_fixed_point_randomized():
    rng = np.random.default_rng(11)
    for _ in range(100):
        h = HamiltonianParams(rng.uniform(0, 2), rng.uniform(0, math.pi))
        rates = DecoherenceRates(*rng.uniform(0, 2, size=3))
        gen = build_generator(h, rates)
        assert np.max(np.abs(gen(steady_state(h, rates)))) <= 1e-10


@given(st.floats(0.05, 2.0), angle_st, rates_st)
def test_steady_state_matches_density_matrix_kernel(d, theta, rates):
    if rates[1] + rates[2] < 1e-3:
        return
    h, r = HamiltonianParams(d, theta), DecoherenceRates(*rates)
    np.testing.assert_allclose(steady_state(h, r), superop_steady_state(d, theta, rates), atol=1e-8)


def test_steady_state_examples():
    for d, theta in ((1.0, 0.3), (2.0, 1.4)):
        np.testing.assert_allclose(
            steady_state(HamiltonianParams(d, theta), DecoherenceRates(0.2, 0.7, 0.7)), 0.0, atol=1e-15)
    np.testing.assert_allclose(
        steady_state(HamiltonianParams(1.0, math.pi / 2), DecoherenceRates(0.3)), 0.0, atol=1e-15)


def test_steady_state_closed_form_for_z():
    h, r = HamiltonianParams(1.0, 1.0), DecoherenceRates(0.05, 0.02, 0.1)
    c, s = math.cos(1.0), math.sin(1.0)
    width = 4 * 0.05 + 0.12
    k = 2 * s * width / (4 * c * c + width * width)
    assert steady_state(h, r).z == pytest.approx((0.02 - 0.1) / (0.12 + s * k), rel=1e-14)


@pytest.mark.parametrize("rates", [DecoherenceRates(), DecoherenceRates(gamma_z=0.4)])
def test_steady_state_degenerate(rates):
    with pytest.raises(DegenerateSteadyStateError):
        steady_state(HamiltonianParams(1.0, 0.0), rates)
    if rates.is_zero:
        with pytest.raises(DegenerateSteadyStateError):
            steady_state(HamiltonianParams(1.0, 1.0), rates)


def test_decay_difference_examples():
    assert decay_difference(DecoherenceRates(0, 1, 5), 0.0) == 2.0
    assert decay_difference(DecoherenceRates(0, 1, 5), math.log(2) / 6) == pytest.approx(1.0)


@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 2.0))
def test_decay_difference_matches_two_trajectories(gp, gm, t):
    h, r = HamiltonianParams(0.0, 0.0), DecoherenceRates(0.3, gp, gm)
    dt = t / 4 if t > 0 else 0.1
    up = propagate(h, r, (0, 0, 1), dt, 5)[-1, 2]
    down = propagate(h, r, (0, 0, -1), dt, 5)[-1, 2]
    assert up - down == pytest.approx(decay_difference(r, 4 * dt), abs=1e-10)


def test_dephasing_zero_crossings_match_characteristic_roots():
    # theta = pi/2: (y, z) obey a damped oscillator whose roots come from the
    # characteristic polynomial lambda^2 + 2 G lambda + d^2 of the 2x2 block
    d, g = 1.0, 0.1
    h, r = HamiltonianParams(d, math.pi / 2), DecoherenceRates(g)
    roots = np.roots([1.0, 2 * g, d * d])
    omega, decay = abs(roots[0].imag), -roots[0].real
    dt = 1e-3
    z = propagate(h, r, (0, 0, 1), dt, 20_000)[:, 2]
    idx = np.nonzero(np.sign(z[:-1]) != np.sign(z[1:]))[0]
    crossings = (idx + z[idx] / (z[idx] - z[idx + 1])) * dt
    # z(t) = e^{-decay t} (cos(omega t) + (decay/omega) sin(omega t))
    phase = math.atan2(decay, omega)
    exact = (np.pi / 2 + phase + np.pi * np.arange(len(crossings))) / omega
    np.testing.assert_allclose(crossings, exact, atol=1e-6)
    np.testing.assert_allclose(np.diff(crossings), np.pi / omega, atol=1e-6)
