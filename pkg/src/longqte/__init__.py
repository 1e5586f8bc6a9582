"""Long-term quantile treatment effects from a trial with surrogates and an observational sample."""

from .data import Dataset, FoldPlan, Schema, load_dataset, make_folds, write_dataset
from .estimator import EstimatorConfig, NumericalError, QteEstimate, estimate_qte
from .inference import confidence_interval, eif_values, estimate_J, variance
from .nuisance import NuisanceBundle, NuisanceConfig, alpha, fit_bundle, transport
from .simulation import NoiseSpec, SimConfig, generate, oracle_true_qte, run_study

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FoldPlan",
    "Schema",
    "load_dataset",
    "write_dataset",
    "make_folds",
    "EstimatorConfig",
    "NumericalError",
    "QteEstimate",
    "estimate_qte",
    "confidence_interval",
    "eif_values",
    "estimate_J",
    "variance",
    "NuisanceBundle",
    "NuisanceConfig",
    "alpha",
    "fit_bundle",
    "transport",
    "NoiseSpec",
    "SimConfig",
    "generate",
    "oracle_true_qte",
    "run_study",
]
