"""Sharp bounds on conditional average treatment effects under bounded hidden confounding."""

from .blearner import BLearnerConfig, BoundFunction, NuisanceSpec, SecondStageSpec, fit_blearner, fit_oracle, fit_plugin
from .domain import BoundPair, Dataset, SensitivityParams, assign_folds, from_log_lambda, make_sensitivity
from .learners import SmootherSpec

__all__ = [
    "BLearnerConfig",
    "BoundFunction",
    "BoundPair",
    "Dataset",
    "NuisanceSpec",
    "SecondStageSpec",
    "SensitivityParams",
    "SmootherSpec",
    "assign_folds",
    "fit_blearner",
    "fit_oracle",
    "fit_plugin",
    "from_log_lambda",
    "make_sensitivity",
]

__version__ = "0.1.0"
