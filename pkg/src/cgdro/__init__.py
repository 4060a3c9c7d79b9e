"""Conditional group distributionally robust classification under covariate shift.

Library for fitting worst-case-robust multinomial classifiers from several
labeled source domains plus unlabeled target covariates, with bias-corrected
moment estimation, a Mirror Prox saddle-point solver, and perturbation-based
confidence intervals.
"""

from .data_model import (
    FitResult,
    InferenceResult,
    LabeledDataset,
    NumericalError,
    ProblemConfig,
    UnlabeledDataset,
    ValidationError,
    load_config,
    load_labeled,
    load_results,
    load_unlabeled,
    save_results,
)

__version__ = "0.1.0"

__all__ = [
    "FitResult",
    "InferenceResult",
    "LabeledDataset",
    "NumericalError",
    "ProblemConfig",
    "UnlabeledDataset",
    "ValidationError",
    "load_config",
    "load_labeled",
    "load_results",
    "load_unlabeled",
    "save_results",
    "__version__",
]
