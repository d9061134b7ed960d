"""Asymptotics and simulation of two-stage iterated ridge-regularized ERM."""

from .losses import (
    LinkFunction,
    NoiseModel,
    SelectionPolicy,
    Stage0Loss,
    Stage1Loss,
    class_flip_link,
    constant_policy,
    correct_classified_policy,
    flip_noise,
    identity_link,
    large_margin_policy,
    make_al_losses,
    make_logistic_pair,
    make_pruning_losses,
    make_square_pair,
    make_zero_pair,
    mixed_margin_policy,
    no_noise,
    sign_link,
    small_margin_policy,
)
from .prox import ProxError, ScalarConvexFn, prox1d, prox1d_batch
from .state_evolution import (
    FixedPointConfig,
    GaussianLaw,
    IntegratorConfig,
    ProblemSpec,
    SolveResult,
    Stage0Params,
    Stage1Params,
    StageDiagnostics,
    audit_residual,
    build_gaussian_law,
    eval_test_metric,
    misclassification_metric,
    solve,
    solve_stage0,
    stage0_update,
    stage1_update,
    test_error_binary,
)

__version__ = "0.1.0"
