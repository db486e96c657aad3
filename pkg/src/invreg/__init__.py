"""Invariance-regularized linear regression for anti-causal domain generalization.

Mean- and variance-based penalties (MIR / VIR) are estimated from unlabeled
multi-environment covariates and added to a least-squares fit on the labeled
environments.
"""
from .data import (
    ColumnSchema, LabeledView, MultiEnvDataset, UnlabeledView, center_per_environment, load_csv_dataset,
    split_views, write_csv_dataset,
)
from .estimators import (
    FittedModel, SecondMomentSystem, build_system, fit_anchor, fit_general_loss, fit_group_dro, fit_method,
    fit_mir, fit_mir_vir, fit_ols, fit_pooled_ridge, fit_vir, fit_with_regularizer, predict, regularized_objective,
    solve_regularized,
)
from .exceptions import ConfigError, ConvergenceError, DataError, InvRegError, NumericalError, SingularSystemError
from .evaluation import EvalReport, ProtocolConfig, Selection, loeo_hyperparam_select, run_loeo_protocol
from .metrics import cvar, moving_average, mse, nmse, rmse, spearman
from .moments import (
    MomentSummary, RegularizerMatrix, env_moment_summaries, h_combined, h_mir, h_vir, read_matrix,
    shared_eigenbasis_penalty, summaries_from_moments, vir_alternative_penalty, vir_penalty, write_matrix,
)
from .oracle import (
    PerturbationClass, build_class, duality_gap, population_problem, risk_at, run_duality_suite,
    sample_feasible_A, worst_case_risk,
)
from .scm import (
    LinearScmSpec, PerturbationSpec, make_cov_shift_suite, make_mean_shift_suite, population_moments,
    r0_coeffs, sample_environment, simulate_dataset,
)

__version__ = "0.1.0"
