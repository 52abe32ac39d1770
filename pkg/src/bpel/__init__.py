"""Bayesian penalized empirical likelihood for moment-condition models."""
from .baselines import SimplexOptions, grid_mode, minimize_profile, nelder_mead, standard_el_estimate
from .errors import (
    BPELError,
    ConfigError,
    EmptySupportError,
    EstimatorError,
    MomentEvaluationError,
    NumericalError,
    OptimizerError,
    SamplerError,
    SingularMatrixError,
    SolverError,
)
from .estimator import (
    EstimatorReport,
    bias_correct,
    bic,
    estimate,
    extract_support,
    nu_interval,
    report_at,
    sandwich,
    tune_nu,
)
from .inner import (
    LagrangeSolution,
    SolverOptions,
    inner_objective,
    kkt_residual,
    solve_lambda,
    solve_lambda_unpenalized,
)
from .likelihood import NEG_INF, PosteriorSpec, PriorSpec, log_el, log_pel, log_posterior
from .model import (
    Dataset,
    IvSimConfig,
    MomentModel,
    ParameterSpace,
    evaluate_moments,
    iv_moment_model,
    mean_moments,
    simulate_iv,
)
from .penalty import PenaltySpec, penalty_subgradient_interval, penalty_value
from .samplers import (
    Chain,
    RwProposal,
    SamplerConfig,
    StudentTProposal,
    WeightedSamples,
    chain_mean,
    effective_sample_size,
    mamis_sample,
    mh_sample,
    weighted_mean,
)

__version__ = "0.1.0"

__all__ = [
    "BPELError",
    "Chain",
    "ConfigError",
    "Dataset",
    "EmptySupportError",
    "EstimatorError",
    "EstimatorReport",
    "IvSimConfig",
    "LagrangeSolution",
    "MomentEvaluationError",
    "MomentModel",
    "NEG_INF",
    "NumericalError",
    "OptimizerError",
    "ParameterSpace",
    "PenaltySpec",
    "PosteriorSpec",
    "PriorSpec",
    "RwProposal",
    "SamplerConfig",
    "SamplerError",
    "SimplexOptions",
    "SingularMatrixError",
    "SolverError",
    "SolverOptions",
    "StudentTProposal",
    "WeightedSamples",
    "bias_correct",
    "bic",
    "chain_mean",
    "effective_sample_size",
    "estimate",
    "evaluate_moments",
    "extract_support",
    "grid_mode",
    "inner_objective",
    "iv_moment_model",
    "kkt_residual",
    "log_el",
    "log_pel",
    "log_posterior",
    "mamis_sample",
    "mean_moments",
    "mh_sample",
    "minimize_profile",
    "nelder_mead",
    "nu_interval",
    "penalty_subgradient_interval",
    "penalty_value",
    "report_at",
    "sandwich",
    "simulate_iv",
    "solve_lambda",
    "solve_lambda_unpenalized",
    "standard_el_estimate",
    "tune_nu",
    "weighted_mean",
]
