"""Composite-variable tracking controller and closed-loop simulation.

The controller drives the composite variable s = (qdot - qdot_g) + lam*(q - q_g)
to zero; with the learned residual compensation d_hat the closed loop obeys

    M sdot + (C + K) s = d - d_hat

so the tracking error is driven entirely by the residual prediction error.
The rollout integrates the true plant with RK4 while the controller uses the
nominal model plus d_hat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import DesiredPoint, DesiredTrajectory, State
from .dynamics import DIVERGENCE_LIMIT, MixedModelParams, drone_actuator_invert

__all__ = [
    "ControllerGains",
    "Rollout",
    "composite_vars",
    "control_law",
    "drone_actuator_invert",
    "simulate_closed_loop",
    "x0_on_trajectory",
]


@dataclass(frozen=True)
class ControllerGains:
    """Scalar gains K (composite-variable feedback) and lam (error mixing)."""

    k: float
    lam: float

    def __post_init__(self):
        if self.k <= 0 or self.lam <= 0:
            raise ValueError("gains must be strictly positive")


def composite_vars(state, desired: DesiredPoint, lam: float):
    """Tracking error, reference velocity/acceleration, composite variable.

    q_tilde = q - q_g
    qdot_r  = qdot_g - lam * q_tilde
    qddot_r = qddot_g - lam * (qdot - qdot_g)
    s       = qdot - qdot_r = (qdot - qdot_g) + lam * q_tilde
    """
    q = state.q if hasattr(state, "q") else state[0]
    qdot = state.qdot if hasattr(state, "q") else state[1]
    q_tilde = q - desired.q_g
    qd_tilde = qdot - desired.qdot_g
    qdot_r = desired.qdot_g - lam * q_tilde
    qddot_r = desired.qddot_g - lam * qd_tilde
    s = qdot - qdot_r
    return q_tilde, qdot_r, qddot_r, s


def control_law(
    model: MixedModelParams,
    state,
    desired: DesiredPoint,
    gains: ControllerGains,
    d_hat: float,
) -> float:
    """Feedback-linearizing tracking control, linear in d_hat.

    u = B^+ (M qddot_r + C qdot_r - K s + G - d_hat).  For force-input
    plants the returned value is the commanded force, to be mapped to an
    actuator command by the plant-specific inversion.
    """
    q = state.q if hasattr(state, "q") else state[0]
    qdot = state.qdot if hasattr(state, "q") else state[1]
    _, qdot_r, qddot_r, s = composite_vars(state, desired, gains.lam)
    m = model.mass_matrix(q)
    c = model.coriolis(q, qdot)
    g = model.gravity(q)
    return (m * qddot_r + c * qdot_r - gains.k * s + g - d_hat) / model.actuation


@dataclass
class Rollout:
    """Closed-loop simulation record, one row per integrator step.

    eps holds the residual prediction error d - d_hat evaluated at each
    recorded state (ground truth is evaluated exactly there).
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    s_values: np.ndarray
    x_tilde: np.ndarray
    eps: np.ndarray
    status: str = "ok"
    touchdown_time: Optional[float] = None
    touchdown_speed: Optional[float] = None
    clamp_count: int = 0

    def rms_tracking(self) -> float:
        """RMS of the tracking-error norm ||x_tilde|| over the rollout."""
        if len(self.times) == 0:
            return math.nan
        sq = self.x_tilde[:, 0] ** 2 + self.x_tilde[:, 1] ** 2
        return float(np.sqrt(np.mean(sq)))

    def sup_tracking(self) -> float:
        if len(self.times) == 0:
            return math.nan
        return float(np.sqrt(np.max(self.x_tilde[:, 0] ** 2 + self.x_tilde[:, 1] ** 2)))


def x0_on_trajectory(traj: DesiredTrajectory) -> State:
    """Initial state exactly on the desired trajectory (s(0) = 0)."""
    return State(float(traj.q_g[0]), float(traj.qdot_g[0]))


def _desired_evaluator(traj: DesiredTrajectory):
    """Fast closed-form (q_g, qdot_g, qddot_g) at arbitrary t."""
    if traj.task == "pendulum":
        c = traj.params["C"]

        def ev(t: float):
            st = math.sin(t)
            return c * st, c * math.cos(t), -c * st

        return ev
    if traj.task == "landing":
        c = traj.params["C"]
        h_g = traj.params["h_g"]
        a = 1.5 - h_g

        def ev(t: float):
            e = math.exp(-c * t)
            return (
                a * e * (1.0 + c * t) + h_g,
                -a * c * c * t * e,
                -a * c * c * e * (1.0 - c * t),
            )

        return ev

    def ev(t: float):
        p = traj.at(t)
        return p.q_g, p.qdot_g, p.qddot_g

    return ev


def simulate_closed_loop(
    model: MixedModelParams,
    gains: ControllerGains,
    d_hat_fn: Callable[[float, float], float],
    true_residual_fn: Callable[[float, float, float], float],
    traj: DesiredTrajectory,
    dt: float,
    x0,
    *,
    ground: Optional[float] = None,
    d_hat_hold_steps: int = 1,
) -> Rollout:
    """Track `traj` in closed loop against the true residual dynamics.

    d_hat_fn(q, qdot) is the learned compensation queried at the actual
    state; true_residual_fn(t, q, qdot) is the plant's residual (time
    dependence supports injected-disturbance studies).  The control is
    recomputed every integrator step and held across the RK4 substeps;
    d_hat itself is refreshed every d_hat_hold_steps steps and held in
    between, which leaves the feedback terms untouched.

    Truncates with status "touchdown" when `ground` is given and the
    altitude reaches it; status "diverged" when the state leaves the
    +-DIVERGENCE_LIMIT box.  Otherwise runs to the trajectory horizon.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if d_hat_hold_steps < 1:
        raise ValueError("d_hat_hold_steps must be >= 1")
    grid_dt = traj.dt
    if grid_dt > 0:
        ratio = grid_dt / dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt must divide the trajectory grid step")

    q = float(x0.q) if hasattr(x0, "q") else float(x0[0])
    qdot = float(x0.qdot) if hasattr(x0, "q") else float(x0[1])
    if not (math.isfinite(q) and math.isfinite(qdot)):
        raise ValueError("x0 must be finite")

    n_steps = int(round(traj.horizon / dt))
    desired_at = _desired_evaluator(traj)
    k, lam = gains.k, gains.lam
    b = model.actuation
    force_input = model.force_input

    times = np.empty(n_steps + 1)
    states = np.empty((n_steps + 1, 2))
    controls = np.empty(n_steps + 1)
    s_values = np.empty(n_steps + 1)
    x_tilde = np.empty((n_steps + 1, 2))
    eps = np.empty(n_steps + 1)

    status = "ok"
    touchdown_time = None
    touchdown_speed = None
    clamp_count = 0
    d_hat = 0.0
    n_rec = 0

    mass = model.mass_matrix
    cor = model.coriolis
    grav = model.gravity
    accel = model.accel
    sixth = dt / 6.0
    half = 0.5 * dt

    if accel is not None:
        def deriv(tt, qq, qqd, bu):
            return accel(qq, qqd, bu, true_residual_fn(tt, qq, qqd))
    else:
        def deriv(tt, qq, qqd, bu):
            d = true_residual_fn(tt, qq, qqd)
            return (bu - cor(qq, qqd) * qqd - grav(qq) + d) / mass(qq)

    for i in range(n_steps + 1):
        t = i * dt
        qg, qdg, qddg = desired_at(t)
        q_t = q - qg
        qd_t = qdot - qdg
        s = qd_t + lam * q_t
        if i % d_hat_hold_steps == 0:
            d_hat = d_hat_fn(q, qdot)

        qdot_r = qdg - lam * q_t
        qddot_r = qddg - lam * qd_t
        force = (mass(q) * qddot_r + cor(q, qdot) * qdot_r - k * s + grav(q) - d_hat) / b
        if force_input:
            u_cmd, clamped = model.actuator_invert(force)
            # applied thrust is exactly max(force, 0): the inversion and
            # the quadratic thrust map cancel, the clamp does not
            applied = force if force > 0.0 else 0.0
            clamp_count += clamped
        else:
            u_cmd = force
            applied = force

        times[n_rec] = t
        states[n_rec, 0] = q
        states[n_rec, 1] = qdot
        controls[n_rec] = u_cmd
        s_values[n_rec] = s
        x_tilde[n_rec, 0] = q_t
        x_tilde[n_rec, 1] = qd_t
        eps[n_rec] = true_residual_fn(t, q, qdot) - d_hat
        n_rec += 1

        if i == n_steps:
            break

        # inline scalar RK4 with u held constant over the step
        bu = b * applied
        k1v = deriv(t, q, qdot, bu)
        q2, qd2 = q + half * qdot, qdot + half * k1v
        k2v = deriv(t + half, q2, qd2, bu)
        q3, qd3 = q + half * qd2, qdot + half * k2v
        k3v = deriv(t + half, q3, qd3, bu)
        q4, qd4 = q + dt * qd3, qdot + dt * k3v
        k4v = deriv(t + dt, q4, qd4, bu)
        q = q + sixth * (qdot + 2.0 * qd2 + 2.0 * qd3 + qd4)
        qdot = qdot + sixth * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)

        if not (math.isfinite(q) and math.isfinite(qdot)) or max(abs(q), abs(qdot)) > DIVERGENCE_LIMIT:
            status = "diverged"
            break
        if ground is not None and q <= ground:
            t_next = (i + 1) * dt
            qg, qdg, _ = desired_at(t_next)
            times[n_rec] = t_next
            states[n_rec, 0] = q
            states[n_rec, 1] = qdot
            controls[n_rec] = u_cmd
            s_values[n_rec] = (qdot - qdg) + lam * (q - qg)
            x_tilde[n_rec, 0] = q - qg
            x_tilde[n_rec, 1] = qdot - qdg
            eps[n_rec] = true_residual_fn(t_next, q, qdot) - d_hat
            n_rec += 1
            status = "touchdown"
            touchdown_time = t_next
            touchdown_speed = qdot
            break

    return Rollout(
        times=times[:n_rec],
        states=states[:n_rec],
        controls=controls[:n_rec],
        s_values=s_values[:n_rec],
        x_tilde=x_tilde[:n_rec],
        eps=eps[:n_rec],
        status=status,
        touchdown_time=touchdown_time,
        touchdown_speed=touchdown_speed,
        clamp_count=clamp_count,
    )
