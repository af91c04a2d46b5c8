"""Evaluation metrics, F1 threshold tuning and seed aggregation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "MetricsReport",
    "roc_auc",
    "multiclass_auc",
    "f1",
    "accuracy",
    "tune_threshold_f1",
    "evaluate",
    "seed_aggregate",
]


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    f1: float | None
    accuracy: float
    threshold: float | None
    n: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve as the normalized Mann-Whitney U, ties at midrank."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present in labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def multiclass_auc(probs, labels) -> float:
    """Macro one-vs-rest AUC; labels are 1..C.  Classes absent from ``labels`` are skipped."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return roc_auc(probs[:, 1], labels == 2)
    aucs = [roc_auc(probs[:, c], labels == c + 1)
            for c in range(probs.shape[1]) if 0 < np.sum(labels == c + 1) < labels.size]
    if not aucs:
        raise ValueError("roc_auc needs at least two classes present in labels")
    return float(np.mean(aucs))


def f1(preds, labels) -> float:
    preds = np.asarray(preds).ravel().astype(bool)
    labels = np.asarray(labels).ravel().astype(bool)
    tp = np.sum(preds & labels)
    fp = np.sum(preds & ~labels)
    fn = np.sum(~preds & labels)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def accuracy(preds, labels) -> float:
    return float(np.mean(np.asarray(preds).ravel() == np.asarray(labels).ravel()))


def _threshold_candidates(scores):
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def tune_threshold_f1(val_scores, val_labels) -> float:
    """Threshold maximizing validation F1 (predict positive when score >= threshold).

    Candidates are the midpoints between sorted unique scores plus 0 and 1;
    ties go to the smallest threshold.
    """
    scores = np.asarray(val_scores, dtype=np.float64).ravel()
    labels = np.asarray(val_labels).ravel().astype(bool)
    if scores.size == 0 or labels.all() or not labels.any():
        raise ValueError("threshold tuning needs both classes in the validation set")
    cands = _threshold_candidates(scores)
    # vectorized sweep: F1 = 2TP / (2TP + FP + FN)
    pred = scores[None, :] >= cands[:, None]
    tp = (pred & labels).sum(axis=1)
    fp = (pred & ~labels).sum(axis=1)
    fn = labels.sum() - tp
    denom = 2 * tp + fp + fn
    f1s = np.where(tp > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(cands[int(np.argmax(f1s))])


def evaluate(test_probs, test_labels, val_probs=None, val_labels=None, seed=None) -> MetricsReport:
    """Report AUC/F1/accuracy on a test split.

    Binary tasks (positive class = 2) get an F1 threshold tuned on the
    validation split when one is given, else 0.5.  For C > 2 F1 and the
    threshold are omitted and accuracy is the headline number.
    """
    test_probs = np.asarray(test_probs)
    test_labels = np.asarray(test_labels)
    C = test_probs.shape[1]
    auc = multiclass_auc(test_probs, test_labels)
    if C == 2:
        threshold = 0.5
        if val_probs is not None:
            threshold = tune_threshold_f1(np.asarray(val_probs)[:, 1], np.asarray(val_labels) == 2)
        preds = test_probs[:, 1] >= threshold
        return MetricsReport(auc=auc, f1=f1(preds, test_labels == 2),
                             accuracy=accuracy(np.where(preds, 2, 1), test_labels),
                             threshold=threshold, n=int(test_labels.size), seed=seed)
    preds = test_probs.argmax(axis=1) + 1
    return MetricsReport(auc=auc, f1=None, accuracy=accuracy(preds, test_labels),
                         threshold=None, n=int(test_labels.size), seed=seed)


def seed_aggregate(reports) -> dict:
    """Mean and population standard deviation of each metric across reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("seed_aggregate needs at least one report")
    out = {}
    for name in ("auc", "f1", "accuracy"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    out["n_seeds"] = len(reports)
    return out
