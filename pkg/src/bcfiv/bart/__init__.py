"""Bayesian additive regression trees (continuous and probit)."""

from .sampler import (
    BartConfig,
    PosteriorEnsemble,
    calibrate_lambda,
    fit_bart,
    fit_bart_binary,
    log_tree_prior,
    ols_sigma,
    predict_posterior,
)

__all__ = [
    "BartConfig",
    "PosteriorEnsemble",
    "calibrate_lambda",
    "fit_bart",
    "fit_bart_binary",
    "log_tree_prior",
    "ols_sigma",
    "predict_posterior",
]
