"""Estimation and inference for mixtures with a novel class.

Training data carry labels for classes 0..K-1; an unlabeled test block
mixes those classes, in unknown proportions, with a further class K that
training never saw. Class densities are tied to the class-0 baseline by
exponential tilts on a feature map, the baseline itself stays
nonparametric, and everything is estimated by maximizing an empirical
likelihood profiled over the baseline point masses.
"""

from oslsel.classify import (
    ClassificationReport,
    CostMatrix,
    accuracy_vs_theta_distance,
    classify_testset,
    empirical_cost,
    expected_costs,
    optimal_assign,
    report,
)
from oslsel.drm_core import (
    BasisSpec,
    DegenerateParameterError,
    OslsDataset,
    OslsError,
    SolverError,
    Theta,
    ValidationError,
    expand_basis,
    log_density_ratio,
    mixture_log_density_term,
    posterior,
)
from oslsel.el_likelihood import (
    ElWeights,
    EmpiricalCdf,
    LambdaSolution,
    NoFeasibleLambdaError,
    el_weights,
    fitted_cdf,
    profile_log_el,
    solve_lambda,
)
from oslsel.em_estimator import (
    ElSolution,
    EmConfig,
    EmTrace,
    e_step,
    fit,
    fit_with_fixed_pi,
    fit_with_known_pi,
    m_step_gamma,
    m_step_p,
    m_step_pi,
)
from oslsel.inference import (
    AssumptionReport,
    ConfidenceInterval,
    CovarianceEstimate,
    CovarianceSingularError,
    ElrCurve,
    ProfileInference,
    assumption_diagnostics,
    chi2_quantile,
    elr,
    elr_confidence_interval,
    elr_curve,
    plugin_covariance,
    wald_interval,
)
from oslsel.sim_harness import (
    AccuracyCurve,
    MetricsTable,
    RateStudy,
    ScenarioSpec,
    generate_replicate,
    reference_scenario,
    run_figure2,
    run_rate_study,
    run_table1,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyCurve",
    "AssumptionReport",
    "BasisSpec",
    "ClassificationReport",
    "ConfidenceInterval",
    "CostMatrix",
    "CovarianceEstimate",
    "CovarianceSingularError",
    "DegenerateParameterError",
    "ElSolution",
    "ElrCurve",
    "ElWeights",
    "EmConfig",
    "EmpiricalCdf",
    "EmTrace",
    "LambdaSolution",
    "MetricsTable",
    "NoFeasibleLambdaError",
    "OslsDataset",
    "OslsError",
    "ProfileInference",
    "RateStudy",
    "ScenarioSpec",
    "SolverError",
    "Theta",
    "ValidationError",
    "accuracy_vs_theta_distance",
    "assumption_diagnostics",
    "chi2_quantile",
    "classify_testset",
    "e_step",
    "el_weights",
    "elr",
    "elr_confidence_interval",
    "elr_curve",
    "empirical_cost",
    "expand_basis",
    "expected_costs",
    "fit",
    "fit_with_fixed_pi",
    "fit_with_known_pi",
    "fitted_cdf",
    "generate_replicate",
    "log_density_ratio",
    "m_step_gamma",
    "m_step_p",
    "m_step_pi",
    "mixture_log_density_term",
    "optimal_assign",
    "plugin_covariance",
    "posterior",
    "profile_log_el",
    "reference_scenario",
    "report",
    "run_figure2",
    "run_rate_study",
    "run_table1",
    "solve_lambda",
    "wald_interval",
    "__version__",
]
