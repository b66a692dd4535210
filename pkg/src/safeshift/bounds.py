"""Tracking tubes and certification from the stability/generalization theory.

Two ingredient families:

* Statistical: a generalization bound for the robust regressor on the
  target trajectory, and a perturbation bound for how the guarantee decays
  on a ball around it.  Both are diagnostics; the exploration loop itself
  budgets the residual error as eps_m = beta * max sigma(x).

* Dynamical: gamma converts a uniform residual-error bound eps_m into the
  radius of the asymptotic tracking-error ball of the closed loop, and
  tracking_envelope gives the transient bound.  certify_trajectory checks
  the worst-case tube against the safety set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DesiredTrajectory, SafetySet, StateBox, TouchdownSpeed

__all__ = [
    "BoundInputs",
    "TubeParams",
    "Certification",
    "generalization_bound",
    "perturbation_bound",
    "gamma",
    "tracking_envelope",
    "eps_m_from_sigma",
    "beta_for_confidence",
    "certify_trajectory",
]


@dataclass(frozen=True)
class BoundInputs:
    """Inputs to the generalization/perturbation bounds.

    w: sup of the target/source density ratio; r: lower bound of the
    clipped ratio on the data support; b: lower bound on theta_y;
    lambda_bar: max slack across statistic dimensions; f_diam: diameter
    of the estimator function class; rademacher: empirical complexity of
    the class on the sample (caller-supplied, default 0 = diagnostic
    only); l_true/l_hat: Lipschitz constants of the true and estimated
    mean; eps_ball: radius of the perturbation ball.
    """

    w: float
    r: float
    b: float
    sigma0_sq: float
    lambda_bar: float = 0.0
    f_diam: float = 0.0
    rademacher: float = 0.0
    delta: float = 0.05
    n: int = 1
    l_true: float = 0.0
    l_hat: float = 0.0
    eps_ball: float = 0.0

    def __post_init__(self):
        vals = (self.w, self.r, self.b, self.sigma0_sq, self.lambda_bar,
                self.f_diam, self.rademacher, self.l_true, self.l_hat, self.eps_ball)
        if any(v < 0 for v in vals):
            raise ValueError("bound inputs must be nonnegative")
        if self.sigma0_sq == 0:
            raise ValueError("sigma0_sq must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.n < 1:
            raise ValueError("n must be at least 1")


@dataclass(frozen=True)
class TubeParams:
    """Eigenvalue bounds of the inertia and gain matrices on the operating set.

    Scalars are their own min and max; the (min, max) pairs let the same
    formulas serve matrix-valued gains.
    """

    m_min: float
    m_max: float
    k_min: float
    k_max: float
    lam_min: float
    lam_max: float

    def __post_init__(self):
        if min(self.m_min, self.m_max, self.k_min, self.k_max,
               self.lam_min, self.lam_max) <= 0:
            raise ValueError("eigenvalue bounds must be strictly positive")
        if self.m_min > self.m_max or self.k_min > self.k_max or self.lam_min > self.lam_max:
            raise ValueError("min bound exceeds max bound")

    @classmethod
    def scalar(cls, m: float, k: float, lam: float) -> "TubeParams":
        return cls(m, m, k, k, lam, lam)


def generalization_bound(inputs: BoundInputs) -> float:
    """Expected target-side regression error bound.

    w * [ (2 r b + sigma0^-2)^-1 + lambda_bar
          + 4 f_diam rademacher + 3 f_diam^2 sqrt(log(2/delta) / (2n)) ]
    """
    variance_term = 1.0 / (2.0 * inputs.r * inputs.b + 1.0 / inputs.sigma0_sq)
    concentration = 3.0 * inputs.f_diam ** 2 * math.sqrt(
        math.log(2.0 / inputs.delta) / (2.0 * inputs.n)
    )
    return inputs.w * (
        variance_term + inputs.lambda_bar + 4.0 * inputs.f_diam * inputs.rademacher + concentration
    )


def perturbation_bound(inputs: BoundInputs) -> float:
    """Error bound on a ball of radius eps_ball around the target support.

    ((2 r b + sigma0^-2)^(-1/2) + sqrt(lambda_bar) + (l_true + l_hat) * eps_ball)^2
    """
    root_var = (2.0 * inputs.r * inputs.b + 1.0 / inputs.sigma0_sq) ** -0.5
    return (
        root_var + math.sqrt(inputs.lambda_bar) + (inputs.l_true + inputs.l_hat) * inputs.eps_ball
    ) ** 2


def gamma(tube: TubeParams) -> float:
    """Gain from the residual-error bound eps_m to the tracking-error ball.

    gamma = (m_max / (k_min * m_min)) * sqrt((1/lam_min)^2 + (1 + lam_max/lam_min)^2)

    The first factor bounds the asymptotic composite-variable magnitude
    per unit eps_m; the square root converts it to the (q, qdot) error
    norm through the error mixing gain.
    """
    s_gain = tube.m_max / (tube.k_min * tube.m_min)
    mix = math.sqrt((1.0 / tube.lam_min) ** 2 + (1.0 + tube.lam_max / tube.lam_min) ** 2)
    return s_gain * mix


def tracking_envelope(t: float, s0_norm: float, tube: TubeParams, eps_m: float) -> float:
    """Time-domain bound on ||s(t)|| for sup||eps|| <= eps_m.

    sqrt(m_max/m_min) e^(-k_min t / m_max) s0 +
    (m_max/(k_min m_min)) (1 - e^(-k_min t / m_max)) eps_m

    The decay rate uses k_min, the conservative choice for matrix gains.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    decay = math.exp(-tube.k_min * t / tube.m_max)
    transient = math.sqrt(tube.m_max / tube.m_min) * decay * s0_norm
    steady = (tube.m_max / (tube.k_min * tube.m_min)) * (1.0 - decay) * eps_m
    return transient + steady


def eps_m_from_sigma(sigma_max: float, beta: float) -> float:
    """Residual-error budget from the max predictive deviation: beta * sigma."""
    if sigma_max < 0 or beta < 0:
        raise ValueError("sigma_max and beta must be nonnegative")
    return beta * sigma_max


def beta_for_confidence(delta: float, n: int) -> float:
    """beta making per-point Gaussian bounds hold jointly w.p. >= 1 - delta.

    Inverts 1 - n e^(-beta/2) >= 1 - delta, giving beta = 2 ln(n / delta).
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if n < 1:
        raise ValueError("n must be at least 1")
    return 2.0 * math.log(n / delta)


@dataclass(frozen=True)
class Certification:
    """Outcome of the worst-case tube check.

    margin is the signed distance to the binding constraint: positive
    slack when safe, negative shortfall when not.  For the touchdown set
    the margin is a velocity slack (m/s) when the tube can reach the
    ground and the minimum altitude clearance (m) otherwise.
    """

    safe: bool
    margin: float
    rho: float


def certify_trajectory(
    traj: DesiredTrajectory, gamma_val: float, eps_m: float, safe_set: SafetySet
) -> Certification:
    """Check the worst-case tube around the desired trajectory against 𝔖.

    The tube has radius rho = gamma_val * eps_m in the (q, qdot) error
    norm; the component projection |q - q_g| <= rho, |qdot - qdot_g| <= rho
    is checked against the safety set at every grid point:

    * StateBox: safe iff max|q_g| + rho < q_abs_max (strict).
    * TouchdownSpeed: at every grid point where the tube can touch the
      ground (q_g - rho <= ground), the worst-case descent speed must
      still be acceptable: qdot_g - rho > qdot_min_at_ground (strict).
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if gamma_val < 0 or eps_m < 0:
        raise ValueError("gamma and eps_m must be nonnegative")
    rho = gamma_val * eps_m

    if isinstance(safe_set, StateBox):
        worst = float(np.max(np.abs(traj.q_g))) + rho
        margin = safe_set.q_abs_max - worst
        return Certification(safe=margin > 0, margin=margin, rho=rho)

    if isinstance(safe_set, TouchdownSpeed):
        contact = traj.q_g - rho <= safe_set.ground
        if not np.any(contact):
            clearance = float(np.min(traj.q_g - rho)) - safe_set.ground
            return Certification(safe=True, margin=clearance, rho=rho)
        worst_speed = float(np.min(traj.qdot_g[contact])) - rho
        margin = worst_speed - safe_set.qdot_min_at_ground
        return Certification(safe=margin > 0, margin=margin, rho=rho)

    raise TypeError(f"unknown safety set {type(safe_set).__name__}")
