"""Purity rating of copper granule samples from stirred images.

Synthetic scene generation with exact ground truth, a segmentation network,
a three-branch purity network, three-phase training and evaluation.
"""

from .bundle import RatingBundle, evaluate_bundle
from .config import GeneratorConfig, LadderConfig, RunConfig, TrainConfig
from .estimators import PurityRegressor, RatingNetwork, SegmentationEstimator, pack_targets
from .ladder import LevelLadder, purity_to_level
from .pipeline import EvalSummary, RatingReport, error_vs_levels, eval_dataset, rate_by_threshold, rate_sample

__version__ = "0.1.0"

__all__ = [
    "EvalSummary", "GeneratorConfig", "LadderConfig", "LevelLadder", "PurityRegressor", "RatingBundle",
    "RatingNetwork", "RatingReport", "RunConfig", "SegmentationEstimator", "TrainConfig",
    "error_vs_levels", "eval_dataset", "evaluate_bundle", "pack_targets", "purity_to_level",
    "rate_by_threshold", "rate_sample",
]
