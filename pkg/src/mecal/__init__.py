"""mecal: covariate measurement error correction.

Regression calibration and a fully Bayesian MCMC approach for classical
covariate measurement error in linear, logistic, Cox and Weibull outcome
models, plus a Monte-Carlo harness that evaluates their frequentist
properties (bias, SD, interval coverage).
"""

from .bayes import MCMCConfig, MCMCResult, PriorConfig, compute_rhat, posterior_summary, run_mcmc
from .calibration import (
    CalibrationModel,
    bootstrap_rc,
    fit_calibration_efficient,
    fit_calibration_simple,
    fit_rc,
    naive_fit,
    predict_conditional_x,
)
from .dataset import (
    MEDataset,
    OutcomeKind,
    OutcomeSpec,
    make_dataset,
    read_csv,
    validate_dataset,
    write_csv,
)
from .estimators import BayesCorrection, NaiveAnalysis, RegressionCalibration
from .fitters import (
    fit_cox_partial,
    fit_logistic_irls,
    fit_mixed_model_ml,
    fit_ols,
    fit_weibull_ml,
)
from .results import FitResult, ParamVector
from .simulate import Scenario, ScenarioResult, derive_nuisance, generate_dataset, render_table, run_scenario

__version__ = "0.1.0"

__all__ = [
    "MEDataset",
    "OutcomeKind",
    "OutcomeSpec",
    "make_dataset",
    "read_csv",
    "write_csv",
    "validate_dataset",
    "ParamVector",
    "FitResult",
    "fit_ols",
    "fit_logistic_irls",
    "fit_cox_partial",
    "fit_weibull_ml",
    "fit_mixed_model_ml",
    "CalibrationModel",
    "fit_calibration_simple",
    "fit_calibration_efficient",
    "predict_conditional_x",
    "fit_rc",
    "naive_fit",
    "bootstrap_rc",
    "PriorConfig",
    "MCMCConfig",
    "MCMCResult",
    "run_mcmc",
    "compute_rhat",
    "posterior_summary",
    "NaiveAnalysis",
    "RegressionCalibration",
    "BayesCorrection",
    "Scenario",
    "ScenarioResult",
    "derive_nuisance",
    "generate_dataset",
    "run_scenario",
    "render_table",
    "__version__",
]
