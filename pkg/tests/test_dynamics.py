"""Plant models, ground-truth residuals, RK4, structural checks."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safeshift.dynamics import (
    DroneParams,
    MixedModelParams,
    PendulumParams,
    SimulationDiverged,
    drone_actuator_invert,
    drone_mixed_model,
    forward_dynamics,
    pendulum_mixed_model,
    skew_check,
    step_rk4,
    true_residual_drone,
    true_residual_pendulum,
)


# -- ground-truth residuals -----------------------------------------------------


def test_pendulum_residual_zero_at_matched_wind():
    p = PendulumParams()
    assert true_residual_pendulum(p, 0.3, p.v_w / p.l) == pytest.approx(0.0, abs=1e-15)


def test_pendulum_residual_example_value():
    p = PendulumParams(v_w=1.0)
    # relative tip speed 3 - 1 = 2, drag -0.1 * 2 * |2| = -0.4
    assert true_residual_pendulum(p, 0.0, 3.0) == pytest.approx(-0.4, rel=1e-12)


@given(qdot=st.floats(-5.0, 5.0))
def test_pendulum_residual_opposes_relative_motion(qdot):
    p = PendulumParams()
    rel = p.l * qdot - p.v_w
    d = true_residual_pendulum(p, 0.1, qdot)
    if rel > 0:
        assert d < 0
    elif rel < 0:
        assert d > 0


def test_drone_residual_example_value():
    p = DroneParams()
    # (2 + 0.5) * exp(-1.5)
    assert true_residual_drone(p, 0.5, -1.0) == pytest.approx(2.5 * math.exp(-1.5), rel=1e-12)
    assert true_residual_drone(p, 0.5, -1.0) == pytest.approx(0.55783, rel=1e-4)


def test_drone_residual_vanishes_at_altitude():
    assert true_residual_drone(DroneParams(), 50.0, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_drone_residual_clamps_below_altitude_floor():
    p = DroneParams()
    at_floor = true_residual_drone(p, p.altitude_floor, 0.0)
    assert true_residual_drone(p, 0.0, 0.0) == at_floor
    assert true_residual_drone(p, -0.3, 0.0) == at_floor


def test_drone_residual_monotone_decreasing_in_altitude():
    p = DroneParams()
    q = np.linspace(p.altitude_floor, 2.0, 200)
    d = np.array([true_residual_drone(p, qi, 0.0) for qi in q])
    assert np.all(np.diff(d) < 0)


# -- forward dynamics -----------------------------------------------------------


def test_pendulum_upright_equilibrium():
    model = pendulum_mixed_model()
    assert forward_dynamics(model, (0.0, 0.0), 0.0, 0.0) == pytest.approx(0.0)


def test_pendulum_horizontal_acceleration_is_g():
    model = pendulum_mixed_model()
    assert forward_dynamics(model, (math.pi / 2, 0.0), 0.0, 0.0) == pytest.approx(9.8)


def test_pendulum_forward_dynamics_identity(rng):
    # qddot = (u + d + m g l sin q) / (m l^2) for the inverted-sign gravity
    p = PendulumParams(m=1.3, l=0.8)
    model = pendulum_mixed_model(p)
    for _ in range(50):
        q, qdot, u, d = rng.uniform(-3, 3, 4)
        expect = (u + d + p.m * p.g * p.l * math.sin(q)) / (p.m * p.l * p.l)
        assert forward_dynamics(model, (q, qdot), u, d) == pytest.approx(expect, rel=1e-12)


def test_drone_hover_thrust_balances_gravity():
    p = DroneParams()
    model = drone_mixed_model(p)
    u_cmd = math.sqrt(p.m * p.g / p.c_t)  # motor command for hover
    thrust = p.c_t * u_cmd ** 2
    assert forward_dynamics(model, (1.0, 0.0), thrust, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_fused_accel_matches_forward_dynamics(rng):
    for model in (pendulum_mixed_model(), drone_mixed_model()):
        for _ in range(50):
            q, qdot, u, d = rng.uniform(-2, 2, 4)
            assert model.accel(q, qdot, model.actuation * u, d) == pytest.approx(
                forward_dynamics(model, (q, qdot), u, d), rel=1e-12, abs=1e-12
            )


def test_actuator_invert_examples():
    u, clamped = drone_actuator_invert(9.8, 1.0)
    assert u == pytest.approx(math.sqrt(9.8))
    assert not clamped
    assert drone_actuator_invert(0.0, 1.0) == (0.0, False)
    assert drone_actuator_invert(-5.0, 1.0) == (0.0, True)
    with pytest.raises(ValueError):
        drone_actuator_invert(1.0, 0.0)


# -- integrator -----------------------------------------------------------------


def _oscillator(t, x, u):
    return np.array([x[1], -x[0]])


def test_rk4_fixed_point():
    x = step_rk4(lambda t, x, u: np.zeros(2), 0.0, np.array([0.4, -0.2]), 0.0, 0.01)
    np.testing.assert_array_equal(x, [0.4, -0.2])


def test_rk4_harmonic_oscillator_one_step():
    dt = 0.01
    x = step_rk4(_oscillator, 0.0, np.array([1.0, 0.0]), 0.0, dt)
    assert x[0] == pytest.approx(math.cos(dt), abs=1e-9)
    assert x[1] == pytest.approx(-math.sin(dt), abs=1e-9)


def _oscillator_error(dt: float) -> float:
    x = np.array([1.0, 0.0])
    n = int(round(1.0 / dt))
    for i in range(n):
        x = step_rk4(_oscillator, i * dt, x, 0.0, dt)
    return abs(x[0] - math.cos(1.0))


def test_rk4_is_fourth_order():
    ratio = _oscillator_error(0.02) / _oscillator_error(0.01)
    assert 14.0 <= ratio <= 18.0


def test_rk4_raises_on_divergence():
    grow = lambda t, x, u: 10.0 * x  # noqa: E731
    x = np.array([1e5, 1e5])
    with pytest.raises(SimulationDiverged):
        for i in range(100):
            x = step_rk4(grow, 0.0, x, 0.0, 0.5)


def test_pendulum_energy_conservation_without_wind():
    """Unforced, undamped pendulum holds total energy to 1e-6 relative."""
    p = PendulumParams(c_d=0.0)
    model = pendulum_mixed_model(p)

    def deriv(t, x, u):
        return np.array([x[1], forward_dynamics(model, x, 0.0, 0.0)])

    def energy(x):
        # inverted-sign gravity: V(q) = -m g l (1 - cos q)
        return 0.5 * p.m * p.l ** 2 * x[1] ** 2 - p.m * p.g * p.l * (1 - math.cos(x[0]))

    x = np.array([0.4, 0.0])
    e0 = energy(x)
    dt = 0.001
    for i in range(10_000):
        x = step_rk4(deriv, i * dt, x, 0.0, dt)
    scale = abs(e0) + p.m * p.g * p.l
    assert abs(energy(x) - e0) / scale < 1e-6


# -- structure ------------------------------------------------------------------


def test_skew_check_holds_for_both_plants():
    assert skew_check(pendulum_mixed_model(), 0.7, 1.3)
    assert skew_check(drone_mixed_model(), 0.7, -0.4)


def test_skew_check_fails_for_inconsistent_coriolis():
    bogus = MixedModelParams(
        mass_matrix=lambda q: 1.0,
        coriolis=lambda q, qdot: 1.0,
        gravity=lambda q: 0.0,
        actuation=1.0,
    )
    assert not skew_check(bogus, 0.0, 1.0)
