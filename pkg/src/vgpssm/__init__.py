"""Variational Gaussian-process state-space models.

Sparse GP transition model with inducing variables, particle smoothing of
the latent states, and batch, stochastic and online training.
"""

__version__ = "0.1.0"

from .benchmark import (
    BenchmarkReport,
    kink_system_generate,
    kink_transition,
    linear_baseline,
    transition_metrics,
)
from .exceptions import (
    ConfigurationError,
    DegenerateWeightsError,
    GpssmError,
    InvalidArgumentError,
    NumericalError,
    ResourceError,
    SingularMatrixError,
)
from .estimator import VariationalGPSSM
from .kernels import KernelSpec, eval_kernel, kernel_matrix
from .model import GpssmModel, LikelihoodSpec, Trajectory, sample_prior_trajectory
from .smoothing import (
    AuxiliaryModel,
    GridSpec,
    ParticleTrajectories,
    bootstrap_fixed_lag_smoother,
    build_auxiliary,
    grid_smoother,
)
from .sparse import (
    InducingPosterior,
    SufficientStats,
    TransitionPredictor,
    accumulate_stats,
    kl_qu_pu,
    online_natural_update,
    optimal_qu,
    phi,
    predict_transition,
    rollout,
)
from .training import (
    PowerSchedule,
    TrainingConfig,
    TrainingState,
    elbo_estimate,
    online_update,
    svi_stats,
    theta_gradient,
    train,
)

__all__ = [
    "KernelSpec",
    "eval_kernel",
    "kernel_matrix",
    "GpssmModel",
    "LikelihoodSpec",
    "Trajectory",
    "sample_prior_trajectory",
    "AuxiliaryModel",
    "BenchmarkReport",
    "ConfigurationError",
    "DegenerateWeightsError",
    "GpssmError",
    "GridSpec",
    "InducingPosterior",
    "InvalidArgumentError",
    "NumericalError",
    "ParticleTrajectories",
    "PowerSchedule",
    "ResourceError",
    "SingularMatrixError",
    "SufficientStats",
    "TrainingConfig",
    "TrainingState",
    "TransitionPredictor",
    "VariationalGPSSM",
    "accumulate_stats",
    "bootstrap_fixed_lag_smoother",
    "build_auxiliary",
    "elbo_estimate",
    "grid_smoother",
    "kink_system_generate",
    "kink_transition",
    "kl_qu_pu",
    "linear_baseline",
    "online_natural_update",
    "online_update",
    "optimal_qu",
    "phi",
    "predict_transition",
    "rollout",
    "svi_stats",
    "theta_gradient",
    "train",
    "transition_metrics",
]
