"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .data import LabelMatrix


def check_features(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature array, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("features contain NaN or infinite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, but the model was fitted with {n_features}")
    return X


def check_label_matrix(L, n_classes: int | None = None) -> LabelMatrix:
    """Accept a LabelMatrix, an N x m integer vote array or an N x m x C probability tensor."""
    if isinstance(L, LabelMatrix):
        lm = L
    else:
        arr = np.asarray(L)
        if arr.ndim == 3:
            lm = LabelMatrix.from_probabilistic(arr)
        elif arr.ndim == 2:
            C = n_classes if n_classes is not None else max(int(arr.max(initial=0)), 2)
            lm = LabelMatrix(arr, C)
        else:
            raise ValueError(f"expected a 2-D vote matrix or 3-D vote tensor, got shape {arr.shape}")
    if n_classes is not None and lm.num_classes != n_classes:
        raise ValueError(f"label matrix has {lm.num_classes} classes, expected {n_classes}")
    return lm


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent numbers of samples: {sorted(lengths)}")


def check_prior(prior, n_classes: int) -> np.ndarray:
    if prior is None:
        return np.full(n_classes, 1.0 / n_classes)
    prior = np.asarray(prior, dtype=np.float64).ravel()
    if prior.shape != (n_classes,) or np.any(prior <= 0):
        raise ValueError(f"prior must be {n_classes} positive reals")
    return prior / prior.sum()


def check_is_fitted(estimator, attr: str):
    if not hasattr(estimator, attr):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() first")


def soft_targets(Y, n_classes: int | None = None) -> np.ndarray:
    """Hard labels 1..C become one-hot rows; soft N x C rows are renormalized."""
    Y = np.asarray(Y)
    if Y.ndim == 1:
        C = n_classes or int(Y.max())
        if Y.min() < 1 or Y.max() > C:
            raise ValueError(f"hard labels must lie in 1..{C}")
        out = np.zeros((Y.size, C))
        out[np.arange(Y.size), Y.astype(np.int64) - 1] = 1.0
        return out
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(Y < 0):
        raise ValueError("soft labels must be non-negative")
    return Y / Y.sum(axis=1, keepdims=True)
