"""Bayesian consensus clustering of mixed-type longitudinal markers.

Subjects are measured repeatedly on several markers (continuous, count, or
binary).  Each marker gets its own mixed-effects clustering; a global
partition ties the marker-level ones together through per-marker adherence
weights, which also drive the choice of the number of clusters.
"""

__version__ = "0.1.0"

from .config import (ConfigError, MarkerConfig, McmcControls, ModelConfig,
                     PriorHyperparams, build_priors, config_from_json,
                     config_to_json, default_vague_priors, validate_config)
from .data import (DataError, Dataset, DesignSpec, MarkerSeries, ParseError,
                   ValidationError, build_designs, ingest_csv, write_csv)
from .families import (FAMILIES, FamilyError, cumulant, inverse_link,
                       log_likelihood, pointwise_log_likelihood,
                       score_and_curvature, variance_function)
from .metrics import (adjusted_adherence, adjusted_rand, arand_report,
                      jaccard_pair, select_K)
from .postprocess import (ClusteringResult, GewekeError, PostprocessError,
                          RelabeledDraws, bayes_pvalue, chi2_discrepancy,
                          geweke_z, point_estimate_mode, ppc_pass,
                          ppc_replicate, relabel_stephens, summarize)
from .sampler import PosteriorDraws, SamplerError, merge_draws, run_chain, vartheta
from .simulate import (ScenarioSpec, SimulatedTruth, SimulationError,
                       TrueParams, default_true_params, rmse_tables,
                       scenario_model_config, simulate_dataset)
from .workflow import FitResult, SelectKResult, fit_dataset, select_k_scan

__all__ = [
    "__version__",
    # config
    "ConfigError", "MarkerConfig", "McmcControls", "ModelConfig",
    "PriorHyperparams", "build_priors", "config_from_json", "config_to_json",
    "default_vague_priors", "validate_config",
    # data
    "DataError", "Dataset", "DesignSpec", "MarkerSeries", "ParseError",
    "ValidationError", "build_designs", "ingest_csv", "write_csv",
    # families
    "FAMILIES", "FamilyError", "cumulant", "inverse_link", "log_likelihood",
    "pointwise_log_likelihood", "score_and_curvature", "variance_function",
    # metrics
    "adjusted_adherence", "adjusted_rand", "arand_report", "jaccard_pair",
    "select_K",
    # postprocess
    "ClusteringResult", "GewekeError", "PostprocessError", "RelabeledDraws",
    "bayes_pvalue", "chi2_discrepancy", "geweke_z", "point_estimate_mode",
    "ppc_pass", "ppc_replicate", "relabel_stephens", "summarize",
    # sampler
    "PosteriorDraws", "SamplerError", "merge_draws", "run_chain", "vartheta",
    # simulate
    "ScenarioSpec", "SimulatedTruth", "SimulationError", "TrueParams",
    "default_true_params", "rmse_tables", "scenario_model_config",
    "simulate_dataset",
    # workflow
    "FitResult", "SelectKResult", "fit_dataset", "select_k_scan",
]
