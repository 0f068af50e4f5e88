"""Agreement-aware binary classification from multiply-annotated data.

A two-stream network learns a classifier and an estimate of how strongly the
annotators agree on each sample; the agreement estimate then sharpens or
softens the classifier output.  Evaluation is by an agreement ratio that puts
the model's agreement with each annotator on the scale of the annotators'
agreement with one another.
"""

from .dataset import MISSING, AnnotationSet, agreement_targets, load_annotations, majority_vote
from .losses import LossConfig
from .metrics import EvalReport, agreement_ratio, cohens_kappa, linear_weighted_kappa
from .model import ModelConfig, TwoStreamModel
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "AnnotationSet",
    "EvalReport",
    "LossConfig",
    "ModelConfig",
    "TrainConfig",
    "TwoStreamModel",
    "agreement_ratio",
    "agreement_targets",
    "cohens_kappa",
    "evaluate",
    "linear_weighted_kappa",
    "load_annotations",
    "majority_vote",
    "train",
]
