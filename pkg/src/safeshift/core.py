"""Shared data types for episodic safe exploration.

States, desired trajectories, candidate pools, safety sets, and the
dataset / episode bookkeeping containers used by the exploration loop.
Desired trajectories live on a uniform time grid but also carry the
closed-form expressions (task name + parameters) so the simulator can
evaluate them at arbitrary times without interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

__all__ = [
    "State",
    "DesiredPoint",
    "DesiredTrajectory",
    "StateBox",
    "TouchdownSpeed",
    "SafetySet",
    "Dataset",
    "EpisodeRecord",
    "RejectedCandidate",
    "desired_point",
    "pendulum_pool",
    "landing_pool",
    "default_pendulum_amplitudes",
    "default_landing_params",
    "safety_contains",
]


class RejectedCandidate(ValueError):
    """Raised when a candidate trajectory parameter is out of range."""


@dataclass(frozen=True)
class State:
    """Generalized position and velocity of a one degree of freedom system."""

    q: float
    qdot: float

    def __post_init__(self):
        if not (math.isfinite(self.q) and math.isfinite(self.qdot)):
            raise ValueError("state components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.q, self.qdot])


@dataclass(frozen=True)
class DesiredPoint:
    """Desired position, velocity and acceleration at time t."""

    t: float
    q_g: float
    qdot_g: float
    qddot_g: float


def desired_point(task: str, params: dict, t: float) -> DesiredPoint:
    """Evaluate the closed-form desired trajectory of `task` at time t.

    Tasks:
      "pendulum": q_g = C sin t, a swing of amplitude C.
      "landing":  q_g = (1.5 - h_g) exp(-C t)(1 + C t) + h_g, a critically
                  damped descent from altitude 1.5 to hover altitude h_g.
    """
    if task == "pendulum":
        c = params["C"]
        return DesiredPoint(t, c * math.sin(t), c * math.cos(t), -c * math.sin(t))
    if task == "landing":
        c = params["C"]
        h_g = params["h_g"]
        a = 1.5 - h_g
        e = math.exp(-c * t)
        q = a * e * (1.0 + c * t) + h_g
        qd = -a * c * c * t * e
        qdd = -a * c * c * e * (1.0 - c * t)
        return DesiredPoint(t, q, qd, qdd)
    raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class DesiredTrajectory:
    """A candidate desired trajectory on a uniform time grid.

    `times` has constant spacing and starts at 0; q_g/qdot_g/qddot_g are the
    desired position, velocity, acceleration sampled on that grid.  `cost`
    is the scalar exploration objective of the candidate (lower is better),
    +inf when the candidate does not achieve its goal within the horizon.
    """

    task: str
    params: dict
    times: np.ndarray
    q_g: np.ndarray
    qdot_g: np.ndarray
    qddot_g: np.ndarray
    cost: float

    def __post_init__(self):
        n = len(self.times)
        if n == 0:
            raise ValueError("empty trajectory grid")
        for arr in (self.q_g, self.qdot_g, self.qddot_g):
            if len(arr) != n:
                raise ValueError("grid arrays must share a length")
        if n > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0):
                raise ValueError("time grid must be strictly increasing")
            # uniform grid: all steps equal to the first one up to roundoff
            if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, steps[0]):
                raise ValueError("time grid must be uniform")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def point(self, i: int) -> DesiredPoint:
        return DesiredPoint(
            float(self.times[i]),
            float(self.q_g[i]),
            float(self.qdot_g[i]),
            float(self.qddot_g[i]),
        )

    def __iter__(self) -> Iterator[DesiredPoint]:
        for i in range(len(self.times)):
            yield self.point(i)

    def grid_xy(self) -> np.ndarray:
        """(n, 2) array of desired (q, qdot) pairs, the model-input grid."""
        return np.column_stack([self.q_g, self.qdot_g])

    def at(self, t: float) -> DesiredPoint:
        """Closed-form evaluation at an arbitrary time (not grid lookup)."""
        return desired_point(self.task, self.params, t)


@dataclass(frozen=True)
class StateBox:
    """Safety set { |q| < q_abs_max }.  Membership is strict."""

    q_abs_max: float

    def __post_init__(self):
        if not self.q_abs_max > 0:
            raise ValueError("q_abs_max must be positive")


@dataclass(frozen=True)
class TouchdownSpeed:
    """Safety set { q > ground or qdot > qdot_min_at_ground }.

    A state violates only when it is at/below ground level AND descending
    at or faster than the threshold speed (which is negative: descending).
    """

    qdot_min_at_ground: float
    ground: float = 0.0

    def __post_init__(self):
        if not self.qdot_min_at_ground < 0:
            raise ValueError("qdot_min_at_ground must be negative")


SafetySet = Union[StateBox, TouchdownSpeed]


def safety_contains(safe_set: SafetySet, point: tuple[float, float, float]) -> bool:
    """Strict membership test for (t, q, qdot) in the safety set."""
    _, q, qdot = point
    if isinstance(safe_set, StateBox):
        return abs(q) < safe_set.q_abs_max
    if isinstance(safe_set, TouchdownSpeed):
        return q > safe_set.ground or qdot > safe_set.qdot_min_at_ground
    raise TypeError(f"unknown safety set {type(safe_set).__name__}")


def _uniform_grid(horizon: float, dt: float) -> np.ndarray:
    if dt <= 0 or horizon <= 0:
        raise ValueError("horizon and dt must be positive")
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9:
        raise ValueError("dt must divide the horizon")
    return np.arange(n + 1) * dt


def pendulum_pool(
    amplitudes, dt: float = 0.01, horizon: float = 20.0
) -> list[DesiredTrajectory]:
    """Sinusoidal swing candidates q_g = C sin t with cost -C.

    Amplitudes outside (0, 1] are rejected: the swing must be a genuine
    excursion but stay clear of gimbal limits on the rig this models.
    """
    times = _uniform_grid(horizon, dt)
    pool = []
    for c in amplitudes:
        c = float(c)
        if not 0.0 < c <= 1.0:
            raise RejectedCandidate(f"pendulum amplitude {c} outside (0, 1]")
        pool.append(
            DesiredTrajectory(
                task="pendulum",
                params={"C": c},
                times=times,
                q_g=c * np.sin(times),
                qdot_g=c * np.cos(times),
                qddot_g=-c * np.sin(times),
                cost=-c,
            )
        )
    return pool


def landing_pool(
    param_pairs,
    dt: float = 0.01,
    horizon: float = 10.0,
    ground: float = 0.0,
    contact_tol: float = 0.01,
) -> list[DesiredTrajectory]:
    """Descent candidates parameterized by rate C and hover altitude h_g.

    q_g = (1.5 - h_g) exp(-C t)(1 + C t) + h_g descends monotonically from
    1.5 toward h_g.  Cost is the first grid time with q_g within contact_tol
    of the ground (+inf if the candidate never gets that low), so faster
    descents to lower hover altitudes are preferred.
    """
    times = _uniform_grid(horizon, dt)
    pool = []
    for c, h_g in param_pairs:
        c, h_g = float(c), float(h_g)
        if c <= 0:
            raise RejectedCandidate(f"descent rate {c} must be positive")
        if not 0.0 <= h_g < 1.5:
            raise RejectedCandidate(f"hover altitude {h_g} outside [0, 1.5)")
        a = 1.5 - h_g
        e = np.exp(-c * times)
        q = a * e * (1.0 + c * times) + h_g
        qd = -a * c * c * times * e
        qdd = -a * c * c * e * (1.0 - c * times)
        touched = np.nonzero(q <= ground + contact_tol)[0]
        cost = float(times[touched[0]]) if len(touched) else math.inf
        pool.append(
            DesiredTrajectory(
                task="landing",
                params={"C": c, "h_g": h_g},
                times=times,
                q_g=q,
                qdot_g=qd,
                qddot_g=qdd,
                cost=cost,
            )
        )
    return pool


def default_pendulum_amplitudes() -> list[float]:
    return [round(0.1 * k, 10) for k in range(1, 11)]


def default_landing_params() -> list[tuple[float, float]]:
    rates = [round(0.25 * k, 10) for k in range(1, 13)]
    hovers = [0.0, 0.25, 0.5, 0.75, 1.0]
    return [(c, h) for c in rates for h in hovers]


@dataclass(frozen=True)
class Dataset:
    """Immutable buffer of (state, residual) training pairs.

    inputs: (n, 2) actual states (q, qdot); targets: (n, d_out) measured
    residual force values.  Episodes grow the buffer via `concat`.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] != 2:
            raise ValueError("inputs must be (n, 2)")
        if self.targets.ndim != 2 or self.targets.shape[0] != self.inputs.shape[0]:
            raise ValueError("targets must be (n, d_out)")
        if len(self.inputs) and not (
            np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))
        ):
            raise ValueError("dataset entries must be finite")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim_out(self) -> int:
        return self.targets.shape[1]

    @classmethod
    def empty(cls, dim_out: int = 1) -> "Dataset":
        return cls(np.zeros((0, 2)), np.zeros((0, dim_out)))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.dim_out != self.dim_out:
            raise ValueError("output dimension mismatch")
        return Dataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.targets, other.targets]),
        )

    def subsample(self, max_points: int) -> "Dataset":
        """Deterministic even-stride thinning to at most max_points rows."""
        n = len(self)
        if n <= max_points:
            return self
        idx = np.linspace(0, n - 1, max_points).round().astype(int)
        return Dataset(self.inputs[idx], self.targets[idx])


@dataclass
class EpisodeRecord:
    """Per-episode log row emitted by the exploration loop."""

    episode: int
    status: str  # "ok", "touchdown", "no_safe_candidate", "diverged"
    params: dict = field(default_factory=dict)
    cost: float = math.nan  # candidate cost at selection time
    realized_cost: float = math.nan  # cost realized by the tracked rollout
    sigma_max: float = math.nan
    eps_m: float = math.nan
    tube_radius: float = math.nan
    n_certified: int = 0
    n_train: int = 0
    rms_tracking: float = math.nan
    rms_residual_error: float = math.nan
    w_hat: float = math.nan
    moment_residual: float = math.nan
    violation: bool = False
