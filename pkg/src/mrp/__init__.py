"""Multilevel regression and poststratification."""
__version__ = "0.1.0"

from .data import (AlignmentReport, DataError, Dataset, PoststratTable, build_poststrat_table,
                   load_csv, validate_alignment)
from .dist import Constant, Flat, HalfStudentT, Normal, StudentT, parse_prior
from .effects import (EffectEstimate, TwoStageModel, fit_two_stage, predict_replication,
                      raw_arm_differences, transport_effect)
from .estimators import MRPRegressor, TwoStageEffectModel
from .formula import FormulaError, FormulaSyntaxError, ModelSpec, parse_formula, render_formula
from .model import LogDensity, PriorSet, build_design, default_priors, log_posterior
from .poststrat import (CellPredictions, PopulationEstimate, aggregate, posterior_predict,
                        predict_cells, sample_population)
from .sampler import (PosteriorDraws, SamplerConfig, ess, prior_predictive, sample_posterior,
                      split_rhat)
from .simulate import UniversityConfig, draw_convenience_sample, generate_university

__all__ = [
    "AlignmentReport", "CellPredictions", "Constant", "DataError", "Dataset", "EffectEstimate",
    "Flat", "FormulaError", "FormulaSyntaxError", "HalfStudentT", "LogDensity", "MRPRegressor",
    "ModelSpec", "Normal", "PopulationEstimate", "PosteriorDraws", "PoststratTable", "PriorSet",
    "SamplerConfig", "StudentT", "TwoStageEffectModel", "TwoStageModel", "UniversityConfig",
    "aggregate", "build_design", "build_poststrat_table", "default_priors",
    "draw_convenience_sample", "ess", "fit_two_stage", "generate_university", "load_csv",
    "log_posterior", "parse_formula", "parse_prior", "posterior_predict", "predict_cells",
    "predict_replication", "prior_predictive", "raw_arm_differences", "render_formula",
    "sample_population", "sample_posterior", "split_rhat", "transport_effect",
    "validate_alignment",
]
