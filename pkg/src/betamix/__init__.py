"""Beta mixed models: marginal likelihood by Laplace, adaptive Gauss-Hermite
or quasi-Monte Carlo integration, data cloning, and prediction."""

from .beta import BetaParams, Link, log_density, link_apply, link_invert
from .dataclone import Priors, clone_dataset, dc_estimates, dc_sample, identifiability
from .estimator import FitResult, fit, fit_sequence, model_compare, profile_ci, wald_interval
from .marginal import Integration, marginal_loglik
from .model import Dataset, ModelSpec, ParamVector, RandomEffects, Schema, ingest_csv
from .predictor import percent_difference, predict_random_effects, predict_scenario
from .simulate import SimDesign, simulate

__all__ = [
    "BetaParams",
    "Dataset",
    "FitResult",
    "Integration",
    "Link",
    "ModelSpec",
    "ParamVector",
    "Priors",
    "RandomEffects",
    "Schema",
    "SimDesign",
    "clone_dataset",
    "dc_estimates",
    "dc_sample",
    "fit",
    "fit_sequence",
    "identifiability",
    "ingest_csv",
    "link_apply",
    "link_invert",
    "log_density",
    "marginal_loglik",
    "model_compare",
    "percent_difference",
    "predict_random_effects",
    "predict_scenario",
    "profile_ci",
    "simulate",
    "wald_interval",
]
