"""Closed-form error bounds, the tracking tube, and certification."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from safeshift.bounds import (
    BoundInputs,
    TubeParams,
    beta_for_confidence,
    certify_trajectory,
    eps_m_from_sigma,
    gamma,
    generalization_bound,
    perturbation_bound,
    tracking_envelope,
)
from safeshift.core import StateBox, TouchdownSpeed, landing_pool, pendulum_pool


# -- Theorem 1 evaluators -----------------------------------------------------


def test_generalization_bound_zero_mass():
    assert generalization_bound(BoundInputs(w=0.0, r=1.0, b=1.0, sigma0_sq=1.0)) == 0.0


def test_generalization_bound_variance_term_only():
    val = generalization_bound(BoundInputs(w=1.0, r=1.0, b=0.5, sigma0_sq=1.0))
    assert val == pytest.approx(0.5, rel=1e-15)


def test_generalization_bound_linear_in_w():
    base = BoundInputs(
        w=1.3, r=0.7, b=0.2, sigma0_sq=2.0, lambda_bar=0.01,
        f_diam=3.0, rademacher=0.05, delta=0.1, n=50,
    )
    one = generalization_bound(base)
    two = generalization_bound(replace(base, w=2.6))
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_perturbation_bound_collapses_to_variance():
    val = perturbation_bound(BoundInputs(w=1.0, r=1.0, b=0.5, sigma0_sq=1.0))
    assert val == pytest.approx(0.5, rel=1e-15)


def test_perturbation_bound_worked_example():
    # (sqrt(0.5) + sqrt(0.04) + 2 * 0.1)^2
    val = perturbation_bound(
        BoundInputs(w=1.0, r=1.0, b=0.5, sigma0_sq=1.0,
                    lambda_bar=0.04, l_true=1.0, l_hat=1.0, eps_ball=0.1)
    )
    assert val == pytest.approx((math.sqrt(0.5) + 0.2 + 0.2) ** 2, rel=1e-12)


def test_perturbation_bound_monotone_in_eps_ball():
    vals = [
        perturbation_bound(
            BoundInputs(w=1.0, r=1.0, b=0.5, sigma0_sq=1.0, l_true=1.0, l_hat=0.5, eps_ball=e)
        )
        for e in np.linspace(0.0, 2.0, 20)
    ]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_bound_inputs_validation():
    with pytest.raises(ValueError):
        BoundInputs(w=-1.0, r=1.0, b=1.0, sigma0_sq=1.0)
    with pytest.raises(ValueError):
        BoundInputs(w=1.0, r=1.0, b=1.0, sigma0_sq=1.0, delta=1.5)
    with pytest.raises(ValueError):
        BoundInputs(w=1.0, r=1.0, b=1.0, sigma0_sq=0.0)


# -- Theorem 2 gain and envelope ------------------------------------------------


def test_gamma_unit_scalars():
    assert gamma(TubeParams.scalar(1.0, 1.0, 1.0)) == pytest.approx(math.sqrt(5.0), rel=1e-15)


def test_gamma_scales_inversely_with_k():
    base = gamma(TubeParams.scalar(1.0, 2.0, 3.0))
    for c in (0.5, 2.0, 10.0):
        assert gamma(TubeParams.scalar(1.0, 2.0 * c, 3.0)) == pytest.approx(base / c, rel=1e-12)


def test_gamma_diagonal_matrix_example():
    tube = TubeParams(m_min=1.0, m_max=2.0, k_min=3.0, k_max=4.0, lam_min=2.0, lam_max=2.0)
    assert gamma(tube) == pytest.approx((2.0 / 3.0) * math.sqrt(0.25 + 4.0), rel=1e-12)
    assert gamma(tube) == pytest.approx(1.37437, abs=5e-6)


def test_envelope_at_zero_and_infinity():
    tube = TubeParams(m_min=1.0, m_max=4.0, k_min=2.0, k_max=2.0, lam_min=1.0, lam_max=1.0)
    assert tracking_envelope(0.0, 0.7, tube, 0.3) == pytest.approx(2.0 * 0.7)
    late = tracking_envelope(1e9, 0.7, tube, 0.3)
    assert late == pytest.approx((4.0 / (2.0 * 1.0)) * 0.3, rel=1e-9)


def test_envelope_pure_decay():
    tube = TubeParams.scalar(1.0, 1.0, 1.0)
    assert tracking_envelope(1.0, 1.0, tube, 0.0) == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_envelope_asymptote_reproduces_gamma():
    """gamma = (t->inf s-envelope per unit eps) * the error mixing factor."""
    tube = TubeParams(m_min=0.8, m_max=1.9, k_min=2.5, k_max=6.0, lam_min=1.5, lam_max=3.0)
    s_asymptote = tracking_envelope(1e12, 0.0, tube, 1.0)
    mix = math.sqrt((1 / tube.lam_min) ** 2 + (1 + tube.lam_max / tube.lam_min) ** 2)
    assert s_asymptote * mix == pytest.approx(gamma(tube), rel=1e-9)


@given(
    s0=st.floats(0.0, 5.0),
    eps=st.floats(0.0, 2.0),
    t=st.floats(0.0, 50.0),
)
def test_envelope_between_extremes(s0, eps, t):
    tube = TubeParams.scalar(1.3, 2.0, 1.0)
    val = tracking_envelope(t, s0, tube, eps)
    start = tracking_envelope(0.0, s0, tube, eps)
    asymptote = (tube.m_max / (tube.k_min * tube.m_min)) * eps
    assert min(start, asymptote) - 1e-12 <= val <= max(start, asymptote) + 1e-12


def test_eps_m_from_sigma_values():
    assert eps_m_from_sigma(0.2, 0.5) == pytest.approx(0.1)
    assert eps_m_from_sigma(0.3, 1.0) == pytest.approx(0.3)
    assert eps_m_from_sigma(0.0, 2.0) == 0.0
    with pytest.raises(ValueError):
        eps_m_from_sigma(-0.1, 1.0)


def test_beta_for_confidence_values():
    assert beta_for_confidence(math.exp(-2.0), 1) == pytest.approx(4.0, rel=1e-12)
    assert beta_for_confidence(0.05, 100) == pytest.approx(2.0 * math.log(2000.0), rel=1e-12)
    assert beta_for_confidence(0.05, 100) == pytest.approx(15.2018, abs=5e-5)
    # monotone: more points need a wider beta, looser delta a narrower one
    assert beta_for_confidence(0.05, 200) > beta_for_confidence(0.05, 100)
    assert beta_for_confidence(0.1, 100) < beta_for_confidence(0.05, 100)


# -- certification ----------------------------------------------------------------


def test_certify_zero_tube_inside_box():
    (traj,) = pendulum_pool([0.9], dt=0.01, horizon=2.0)
    cert = certify_trajectory(traj, 0.2, 0.0, StateBox(1.5))
    assert cert.safe and cert.rho == 0.0
    # grid max of 0.9*sin(t) sits a hair under 0.9 (grid never lands on pi/2)
    assert cert.margin == pytest.approx(1.5 - 0.9, abs=1e-5)


def test_certify_huge_tube_unsafe():
    (traj,) = pendulum_pool([0.1], dt=0.01, horizon=2.0)
    cert = certify_trajectory(traj, 1.0, 2.0, StateBox(1.5))
    assert not cert.safe
    assert cert.margin < 0


def test_certify_pendulum_worked_example():
    # C = 0.9, gamma = 0.2, eps_m = 0.5: worst excursion 1.0 < 1.5 -> safe
    (traj,) = pendulum_pool([0.9], dt=0.01, horizon=20.0)
    cert = certify_trajectory(traj, 0.2, 0.5, StateBox(1.5))
    assert cert.safe
    assert cert.rho == pytest.approx(0.1)
    assert cert.margin == pytest.approx(0.5, abs=1e-6)


def test_certify_monotone_in_eps_m():
    (traj,) = pendulum_pool([0.8], dt=0.01, horizon=5.0)
    box = StateBox(1.5)
    safe_flags = [certify_trajectory(traj, 0.3, e, box).safe for e in np.linspace(0, 3, 40)]
    # once unsafe, never safe again as eps grows
    first_unsafe = safe_flags.index(False)
    assert all(not f for f in safe_flags[first_unsafe:])


def test_certify_touchdown_no_contact_branch():
    # hover candidate: the tube never reaches the ground -> safe via clearance
    (traj,) = landing_pool([(1.0, 0.5)], dt=0.01, horizon=10.0)
    cert = certify_trajectory(traj, 1.0, 0.1, TouchdownSpeed(-1.0, 0.0))
    assert cert.safe
    assert cert.margin == pytest.approx(float(np.min(traj.q_g)) - 0.1, rel=1e-9)


def test_certify_touchdown_contact_branch():
    (traj,) = landing_pool([(2.0, 0.0)], dt=0.01, horizon=10.0)
    ts = TouchdownSpeed(-1.0, 0.0)
    rho = 0.05
    cert = certify_trajectory(traj, 1.0, rho, ts)
    contact = traj.q_g - rho <= 0.0
    worst = float(np.min(traj.qdot_g[contact])) - rho
    assert cert.margin == pytest.approx(worst - (-1.0), rel=1e-9)
    assert cert.safe == (cert.margin > 0)


def test_certify_touchdown_fast_descent_with_fat_tube_unsafe():
    (traj,) = landing_pool([(3.0, 0.0)], dt=0.01, horizon=10.0)
    # a 0.9 m/s tube makes the worst-case contact speed exceed -1 m/s
    cert = certify_trajectory(traj, 1.0, 0.9, TouchdownSpeed(-1.0, 0.0))
    assert not cert.safe
