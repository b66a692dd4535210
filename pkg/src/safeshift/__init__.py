"""Safe episodic exploration under covariate shift.

Residual dynamics are learned with a shift-robust penalized regressor,
converted into tracking-tube radii through concentration and perturbation
bounds, and used to certify candidate trajectories before they are flown.
Two simulated tasks (pendulum swing-up under wind drag, drone landing in
ground effect) plus an exact-GP baseline and a CLI runner.
"""

from .bounds import (
    BoundInputs,
    Certification,
    TubeParams,
    beta_for_confidence,
    certify_trajectory,
    eps_m_from_sigma,
    gamma,
    generalization_bound,
    perturbation_bound,
    tracking_envelope,
)
from .controller import (
    ControllerGains,
    Rollout,
    composite_vars,
    control_law,
    drone_actuator_invert,
    simulate_closed_loop,
    x0_on_trajectory,
)
from .core import (
    Dataset,
    DesiredPoint,
    DesiredTrajectory,
    EpisodeRecord,
    RejectedCandidate,
    StateBox,
    State,
    TouchdownSpeed,
    landing_pool,
    pendulum_pool,
    safety_contains,
)
from .density_ratio import (
    KdeModel,
    RatioConfig,
    density_ratio,
    kde_density,
    kde_fit,
    max_ratio_on_traj,
)
from .dynamics import (
    DroneParams,
    MixedModelParams,
    PendulumParams,
    SimulationDiverged,
    drone_mixed_model,
    forward_dynamics,
    pendulum_mixed_model,
    skew_check,
    step_rk4,
    true_residual_drone,
    true_residual_pendulum,
)
from .explore import (
    ConfigError,
    ExperimentConfig,
    ExperimentResult,
    GpLearner,
    RobustLearner,
    default_config,
    make_learner,
    run_episode,
    run_experiment,
)
from .gp_baseline import GpHyper, GpModel, gp_fit, gp_predict, kernel_eval
from .robust_regression import (
    FeatureNet,
    RobustModel,
    TrainConfig,
    feature_net_init,
    fit,
    initial_model,
    lipschitz_bound,
    load_checkpoint,
    moment_residual,
    nll_loss,
    predict,
    save_checkpoint,
    sigma_max_on_traj,
    spectral_normalize,
)

__version__ = "0.1.0"

__all__ = [
    "BoundInputs",
    "Certification",
    "ConfigError",
    "ControllerGains",
    "Dataset",
    "DesiredPoint",
    "DesiredTrajectory",
    "DroneParams",
    "EpisodeRecord",
    "ExperimentConfig",
    "ExperimentResult",
    "FeatureNet",
    "GpHyper",
    "GpLearner",
    "GpModel",
    "KdeModel",
    "MixedModelParams",
    "PendulumParams",
    "RatioConfig",
    "RejectedCandidate",
    "RobustLearner",
    "RobustModel",
    "Rollout",
    "SimulationDiverged",
    "State",
    "StateBox",
    "TouchdownSpeed",
    "TrainConfig",
    "TubeParams",
    "beta_for_confidence",
    "certify_trajectory",
    "composite_vars",
    "control_law",
    "default_config",
    "density_ratio",
    "drone_actuator_invert",
    "drone_mixed_model",
    "eps_m_from_sigma",
    "feature_net_init",
    "fit",
    "forward_dynamics",
    "gamma",
    "generalization_bound",
    "gp_fit",
    "gp_predict",
    "initial_model",
    "kde_density",
    "kde_fit",
    "kernel_eval",
    "landing_pool",
    "lipschitz_bound",
    "load_checkpoint",
    "make_learner",
    "max_ratio_on_traj",
    "moment_residual",
    "nll_loss",
    "pendulum_mixed_model",
    "pendulum_pool",
    "perturbation_bound",
    "predict",
    "run_episode",
    "run_experiment",
    "safety_contains",
    "save_checkpoint",
    "sigma_max_on_traj",
    "simulate_closed_loop",
    "skew_check",
    "spectral_normalize",
    "step_rk4",
    "tracking_envelope",
    "true_residual_drone",
    "true_residual_pendulum",
    "x0_on_trajectory",
]
