"""Dynamic event-study panel models with feedback: simulation, integrated likelihood,
estimation and counterfactual decomposition."""

from .counterfactual import DecompositionResult, ModelParams, Scenario, ScenarioPaths, decompose, simulate_scenario
from .estimation import (
    FitOptions,
    FitResult,
    MonteCarloStudy,
    StudyCell,
    feedback_regression,
    fit_feedback,
    fit_outcome_model,
    fit_two_step,
    monte_carlo,
    naive_least_squares,
    standard_errors,
)
from .likelihood import demean_panel, lambda_posterior, loglik, loglik_gradient, marginal_of_unit
from .model_core import (
    NEVER,
    EventDesign,
    FeedbackModel,
    HeterogeneityModel,
    ModelError,
    PanelData,
    StructuralParams,
    build_loadings,
    delta_path,
    pack_params,
    unpack_params,
)
from .simulation import InitialLaw, LatentRecord, SimConfig, joint_logdensity, simulate_panel

__version__ = "0.1.0"
