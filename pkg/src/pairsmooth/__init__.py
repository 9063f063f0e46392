"""Desk-scale lab for pairwise label smoothing.

Pieces: a small float64 autodiff tensor core, a dual-head MLP classifier
(logit head plus a learned smoothing-distribution head), soft-target
construction for baseline / uniform-smoothing / mixup / pairwise strategies,
an SGD training loop with an alternating original/averaged batch schedule,
and confidence-calibration tooling (ECE, temperature scaling, histograms).
"""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad
from .model import DualHeadClassifier, DualHeadOutput
from .smoothing import Phase, StrategyKind, TargetStrategy
from .trainer import TrainConfig, train, evaluate
from .calibration import compute_ece, apply_temperature, fit_temperature
from .data import Dataset, gen_blobs, gen_digits, read_idx, split

__all__ = [
    "Tensor",
    "no_grad",
    "DualHeadClassifier",
    "DualHeadOutput",
    "Phase",
    "StrategyKind",
    "TargetStrategy",
    "TrainConfig",
    "train",
    "evaluate",
    "compute_ece",
    "apply_temperature",
    "fit_temperature",
    "Dataset",
    "gen_blobs",
    "gen_digits",
    "read_idx",
    "split",
]
