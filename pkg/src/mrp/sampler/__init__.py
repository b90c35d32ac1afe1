"""Posterior and prior-predictive sampling with convergence diagnostics."""
from .core import (ESS_MIN, RHAT_MAX, ConvergenceWarning, DiagnosticReport, PosteriorDraws,
                   SamplerConfig, SamplerError, prior_predictive, sample_posterior)
from .diagnostics import ess, ess_bulk, mcse_mean, split_rhat

__all__ = [
    "ConvergenceWarning",
    "DiagnosticReport",
    "ESS_MIN",
    "PosteriorDraws",
    "RHAT_MAX",
    "SamplerConfig",
    "SamplerError",
    "ess",
    "ess_bulk",
    "mcse_mean",
    "prior_predictive",
    "sample_posterior",
    "split_rhat",
]
