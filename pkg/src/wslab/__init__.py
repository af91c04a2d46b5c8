"""Weak-supervision lab: the WeaSEL end-to-end learner, label-model baselines
and synthetic robustness experiments."""

__version__ = "0.1.0"

from .data import Dataset, LabelMatrix, SyntheticLFSpec, generate_blobs, generate_lfs, one_hot
from .labelmodels import MajorityVote, NaiveBayesEM, TripletLabelModel
from .metrics import MetricsReport, evaluate, f1, roc_auc, tune_threshold_f1
from .weasel import SoftLabelClassifier, WeaselClassifier

__all__ = [
    "Dataset",
    "LabelMatrix",
    "SyntheticLFSpec",
    "generate_blobs",
    "generate_lfs",
    "one_hot",
    "MajorityVote",
    "NaiveBayesEM",
    "TripletLabelModel",
    "MetricsReport",
    "evaluate",
    "f1",
    "roc_auc",
    "tune_threshold_f1",
    "WeaselClassifier",
    "SoftLabelClassifier",
]
