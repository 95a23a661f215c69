"""Fully Bayesian measurement-error correction via MH-within-Gibbs."""

from .config import MCMCConfig, PriorConfig
from .diagnostics import (
    ChainResult,
    MCMCResult,
    ParamSummary,
    compute_rhat,
    posterior_summary,
)
from .sampler import gamma_process_posterior_params, run_mcmc

__all__ = [
    "MCMCConfig",
    "PriorConfig",
    "ChainResult",
    "MCMCResult",
    "ParamSummary",
    "compute_rhat",
    "posterior_summary",
    "gamma_process_posterior_params",
    "run_mcmc",
]
