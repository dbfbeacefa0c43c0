"""Multilevel localized ensemble Kalman-Bucy filtering.

State estimation for continuous-time linear and nonlinear diffusions with
partial noisy observations, covariance-localized ensemble filters, their
telescoped multilevel combinations, log normalizing-constant estimation and
online likelihood-based parameter estimation, plus an exact Kalman-Bucy /
Riccati reference solver for linear-Gaussian ground truth.
"""

__version__ = "0.1.0"

from .models import (
    FilterModel,
    ObservationPath,
    SignalPath,
    build_grid_model,
    build_linear_model,
    build_lorenz96_model,
    grid_coords,
    grid_index,
    lorenz96_drift,
    simulate_truth,
)
from .reference_filter import KbfState, kbf_means, kbf_solve, riccati_drift
from .enkbf import (
    Ensemble,
    Moments,
    SingularCovarianceError,
    run_filter,
    sample_moments,
    step_counter,
    step_deterministic,
    step_transport,
    step_vanilla,
)
from .localization import (
    TaperMatrix,
    TaperSpec,
    build_taper,
    distance_matrix,
    localize,
    taper_for_model,
    taper_value,
)
from .multilevel import (
    CoupledPairResult,
    LevelPlan,
    MlEstimate,
    allocate_levels,
    coupled_pair_run,
    ml_run,
    pair_cost,
    single_cost,
    variance_of_increment,
)
from .normalizing_constant import (
    LogNcEstimate,
    innovations_log_nc,
    log_nc_from_means,
    log_nc_ratio,
    ml_log_nc,
)
from .parameter_estimation import (
    RmlResult,
    SpsaState,
    SpsaStepInfo,
    StepSchedules,
    rml_run,
    spsa_perturbation,
    spsa_step,
    theta_update,
)

__all__ = [
    "CoupledPairResult",
    "Ensemble",
    "FilterModel",
    "KbfState",
    "LevelPlan",
    "LogNcEstimate",
    "MlEstimate",
    "Moments",
    "ObservationPath",
    "RmlResult",
    "SignalPath",
    "SingularCovarianceError",
    "SpsaState",
    "SpsaStepInfo",
    "StepSchedules",
    "TaperMatrix",
    "TaperSpec",
    "allocate_levels",
    "build_grid_model",
    "build_linear_model",
    "build_lorenz96_model",
    "build_taper",
    "coupled_pair_run",
    "distance_matrix",
    "grid_coords",
    "grid_index",
    "innovations_log_nc",
    "kbf_means",
    "kbf_solve",
    "localize",
    "log_nc_from_means",
    "log_nc_ratio",
    "lorenz96_drift",
    "ml_log_nc",
    "ml_run",
    "pair_cost",
    "riccati_drift",
    "rml_run",
    "run_filter",
    "sample_moments",
    "simulate_truth",
    "single_cost",
    "spsa_perturbation",
    "spsa_step",
    "step_counter",
    "step_deterministic",
    "step_transport",
    "step_vanilla",
    "taper_for_model",
    "taper_value",
    "theta_update",
    "variance_of_increment",
]
