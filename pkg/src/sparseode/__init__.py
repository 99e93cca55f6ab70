"""Sparse linear-ODE system identification by l1-penalized nonlinear least
squares, with divergence-based degrees of freedom and SURE risk estimation."""

from .expm import (
    expm,
    expm_frechet,
    expm_second,
    grad_trace_expm,
    hess_trace_expm_entry,
    logm_principal,
)
from .models import IsochronalOdeModel, LinearModel, MultiTimeOdeModel, Parametrization
from .solver import (
    FitResult,
    LambdaPath,
    SolverConfig,
    coordinate_descent,
    default_lambda_grid,
    kkt_check,
    lambda_max,
    lambda_path,
)
from .dof import (
    L2Ball,
    L2Sphere,
    RiskEstimate,
    TwoAxes,
    analytic_df,
    analytic_project,
    div_l1_constrained,
    div_unconstrained,
    sure_risk,
    tic,
)
from .oracle import (
    McConfig,
    fd_divergence,
    mc_df_covariance,
    mc_df_stein,
    mc_true_risk,
    numeric_projection,
    rho_eval,
)
from .stepwise import SearchState, forward_stepwise, search_df
from .simulate import SimConfig, SimSummary, generate_replication, mle_fit, paper_b10, run_study, threshold_curve

__version__ = "0.1.0"
