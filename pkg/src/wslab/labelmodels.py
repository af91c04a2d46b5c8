"""Baseline label models that aggregate LF votes without looking at features.

* :class:`MajorityVote`: vote counting.
* :class:`NaiveBayesEM`: Dawid-Skene style EM on per-LF confusion matrices,
  the conditionally independent generative model.  It stands in for the
  matrix-completion label model used in the literature.
* :class:`TripletLabelModel`: closed-form method-of-moments accuracies for
  binary tasks, aggregated over triplets by a single pick, mean or median.

All models follow ``fit(L)`` / ``predict_proba(L)`` / ``predict(L)`` and
return posteriors with columns for classes 1..C.
"""
from __future__ import annotations

import itertools
import json
import logging
import warnings

import numpy as np
from scipy.special import expit, logsumexp
from sklearn.base import BaseEstimator

from ._validation import check_is_fitted, check_label_matrix, check_prior
from .data import LabelMatrix, one_hot

__all__ = [
    "MajorityVote",
    "NaiveBayesEM",
    "TripletLabelModel",
    "majority_vote",
    "nb_em_fit",
    "nb_posterior",
    "triplet_from_moments",
    "triplet_moments",
    "triplet_fit",
    "triplet_posterior",
    "ConvergenceWarning",
]

logger = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


class MajorityVote(BaseEstimator):
    """Normalized vote counts; rows without votes fall back to the prior."""

    def __init__(self, prior=None, random_state=0):
        self.prior = prior
        self.random_state = random_state

    def fit(self, L, y=None):
        lm = check_label_matrix(L)
        self.n_classes_ = lm.num_classes
        self.prior_ = check_prior(self.prior, lm.num_classes)
        return self

    def predict_proba(self, L) -> np.ndarray:
        check_is_fitted(self, "prior_")
        lm = check_label_matrix(L, self.n_classes_)
        counts = one_hot(lm).sum(axis=1)
        totals = counts.sum(axis=1, keepdims=True)
        out = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), self.prior_)
        return out

    def predict(self, L) -> np.ndarray:
        """Hard labels 1..C: argmax with seeded uniform tie-breaking, prior draws for empty rows."""
        probs = self.predict_proba(L)
        rng = np.random.default_rng(self.random_state)
        n, C = probs.shape
        empty = check_label_matrix(L, self.n_classes_).covered_mask() == False  # noqa: E712
        is_max = np.isclose(probs, probs.max(axis=1, keepdims=True), rtol=0, atol=1e-12)
        # uniform pick among the maxima: random key, masked argmax
        keys = rng.random((n, C))
        labels = np.argmax(np.where(is_max, keys, -1.0), axis=1) + 1
        if empty.any():
            labels[empty] = rng.choice(C, size=int(empty.sum()), p=self.prior_) + 1
        return labels


def majority_vote(lm: LabelMatrix, prior=None, mode: str = "soft", seed: int = 0) -> np.ndarray:
    mv = MajorityVote(prior=prior, random_state=seed).fit(lm)
    if mode == "soft":
        return mv.predict_proba(lm)
    if mode == "hard":
        return mv.predict(lm)
    raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")


class NaiveBayesEM(BaseEstimator):
    """Per-LF confusion matrices P(vote = v | y = c), v in 0..C, fitted by EM.

    The class prior is held fixed at ``prior`` (uniform by default).  The
    M-step adds ``smoothing`` pseudo-counts to every cell, so EM ascends the
    log-likelihood plus a Dirichlet log-prior; that penalized objective is
    what ``objective_history_`` records and is non-decreasing.
    """

    def __init__(self, prior=None, max_iter=200, tol=1e-6, smoothing=1.0):
        self.prior = prior
        self.max_iter = max_iter
        self.tol = tol
        self.smoothing = smoothing

    def _vote_onehot(self, lm):
        n, m = lm.votes.shape
        V = np.zeros((n, m, lm.num_classes + 1))
        np.put_along_axis(V, lm.votes[:, :, None], 1.0, axis=2)
        return V

    def _log_joint(self, lm, log_conf, log_prior):
        # log P(votes_i, y=c) for every row; log_conf is m x (C+1) x C
        m = lm.n_lfs
        per_lf = log_conf[np.arange(m)[None, :], lm.votes]  # N x m x C
        return per_lf.sum(axis=1) + log_prior

    def _m_step(self, V, q):
        counts = np.einsum("nmv,nc->mvc", V, q) + self.smoothing
        return counts / counts.sum(axis=1, keepdims=True)

    def _objective(self, log_joint, conf):
        value = logsumexp(log_joint, axis=1).sum()
        if self.smoothing:
            value += self.smoothing * np.log(conf).sum()
        return float(value)

    def fit(self, L, y=None):
        lm = check_label_matrix(L)
        covered = lm.covered_mask()
        if not covered.any():
            raise ValueError("NaiveBayesEM needs at least one row with a vote (coverage is 0)")
        lm = lm.take(np.flatnonzero(covered))
        C = lm.num_classes
        self.n_classes_ = C
        self.prior_ = check_prior(self.prior, C)
        log_prior = np.log(self.prior_)
        V = self._vote_onehot(lm)

        q = MajorityVote(prior=self.prior_).fit(lm).predict_proba(lm)
        conf = self._m_step(V, q)
        history = []
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            log_joint = self._log_joint(lm, np.log(conf), log_prior)
            history.append(self._objective(log_joint, conf))
            q = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
            new_conf = self._m_step(V, q)
            delta = np.abs(new_conf - conf).max()
            conf = new_conf
            if delta < self.tol:
                self.converged_ = True
                break
        self.n_iter_ = it
        if not self.converged_:
            warnings.warn(f"EM did not converge in {self.max_iter} iterations", ConvergenceWarning)
        log_joint = self._log_joint(lm, np.log(conf), log_prior)
        history.append(self._objective(log_joint, conf))
        self.confusion_ = conf
        self.objective_history_ = history
        return self

    def predict_proba(self, L) -> np.ndarray:
        check_is_fitted(self, "confusion_")
        lm = check_label_matrix(L, self.n_classes_)
        if lm.n_lfs != self.confusion_.shape[0]:
            raise ValueError(f"model has {self.confusion_.shape[0]} LFs, matrix has {lm.n_lfs}")
        log_joint = self._log_joint(lm, np.log(self.confusion_), np.log(self.prior_))
        return np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))

    def predict(self, L) -> np.ndarray:
        return self.predict_proba(L).argmax(axis=1) + 1

    def to_dict(self) -> dict:
        check_is_fitted(self, "confusion_")
        return {"model": "nb-em", "prior": self.prior_.tolist(), "confusion": self.confusion_.tolist(),
                "converged": self.converged_, "n_iter": self.n_iter_}


def nb_em_fit(lm: LabelMatrix, prior=None, max_iters: int = 200, tol: float = 1e-6) -> NaiveBayesEM:
    return NaiveBayesEM(prior=prior, max_iter=max_iters, tol=tol).fit(lm)


def nb_posterior(model: NaiveBayesEM, lm: LabelMatrix) -> np.ndarray:
    return model.predict_proba(lm)


# ---------------------------------------------------------------------------
# triplets

def _signed_votes(lm: LabelMatrix) -> np.ndarray:
    # class 1 -> -1, class 2 -> +1, abstain -> 0
    return np.select([lm.votes == 2, lm.votes == 1], [1.0, -1.0], 0.0)


def triplet_moments(lm: LabelMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Second moments E[l_i l_j | both vote] and the co-voting counts."""
    S = _signed_votes(lm)
    active = (S != 0).astype(np.float64)
    counts = active.T @ active
    M = np.divide(S.T @ S, counts, out=np.zeros_like(counts), where=counts > 0)
    return M, counts


def triplet_from_moments(M, aggregation: str = "mean", min_moment: float = 1e-3,
                         max_pairs: int | None = 20000, seed: int = 0):
    """Correlation-scale accuracies a_i = sqrt(|M_ij M_ik / M_jk|) aggregated over (j, k).

    Returns ``(estimates, fallback)``; ``fallback[i]`` is True when LF i had
    no pair with ``|M_jk| >= min_moment`` and its estimate is NaN.
    """
    if aggregation not in ("single", "mean", "median"):
        raise ValueError(f"aggregation must be 'single', 'mean' or 'median', got {aggregation!r}")
    M = np.asarray(M, dtype=np.float64)
    m = M.shape[0]
    if m < 3:
        raise ValueError(f"the triplet method needs at least 3 LFs, got {m}")
    pairs = np.array(list(itertools.combinations(range(m), 2)))
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = np.random.default_rng(seed)
        pairs = pairs[np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))]
    J, K = pairs[:, 0], pairs[:, 1]
    Mjk = M[J, K]
    admissible = np.abs(Mjk) >= min_moment
    est = np.full(m, np.nan)
    for i in range(m):
        ok = admissible & (J != i) & (K != i)
        if not ok.any():
            continue
        vals = np.sqrt(np.abs(M[i, J[ok]] * M[i, K[ok]] / Mjk[ok]))
        if aggregation == "single":
            est[i] = vals[0]
        elif aggregation == "mean":
            est[i] = vals.mean()
        else:
            est[i] = np.median(vals)
    return est, np.isnan(est)


class TripletLabelModel(BaseEstimator):
    """Binary method-of-moments label model.

    Accuracies are conditioned on the LF voting; posteriors treat each LF as a
    symmetric noisy channel and ignore abstains.
    """

    def __init__(self, aggregation="mean", prior=None, delta=1e-3, min_moment=1e-3,
                 max_pairs=20000, random_state=0):
        self.aggregation = aggregation
        self.prior = prior
        self.delta = delta
        self.min_moment = min_moment
        self.max_pairs = max_pairs
        self.random_state = random_state

    def fit(self, L, y=None):
        lm = check_label_matrix(L)
        if lm.num_classes != 2:
            raise ValueError(f"the triplet method only supports binary tasks (C=2), got C={lm.num_classes}")
        if lm.n_lfs < 3:
            raise ValueError(f"the triplet method needs at least 3 LFs, got {lm.n_lfs}")
        self.prior_ = check_prior(self.prior, 2)
        M, _ = triplet_moments(lm)
        est, fallback = triplet_from_moments(M, self.aggregation, self.min_moment,
                                             self.max_pairs, self.random_state)
        self.n_fallback_ = int(fallback.sum())
        if self.n_fallback_:
            warnings.warn(f"{self.n_fallback_} LF(s) had no admissible triplet; using accuracy "
                          f"{0.5 + self.delta}", ConvergenceWarning)
        self.moments_ = M
        self.correlations_ = est
        acc = np.where(fallback, 0.5 + self.delta, (np.nan_to_num(est) + 1.0) / 2.0)
        self.accuracies_ = np.clip(acc, 0.5 + self.delta, 1.0 - self.delta)
        self.n_classes_ = 2
        return self

    def predict_proba(self, L) -> np.ndarray:
        check_is_fitted(self, "accuracies_")
        lm = check_label_matrix(L, 2)
        return _symmetric_posterior(lm, self.accuracies_, self.prior_)

    def predict(self, L) -> np.ndarray:
        return self.predict_proba(L).argmax(axis=1) + 1

    def to_dict(self) -> dict:
        check_is_fitted(self, "accuracies_")
        return {"model": f"triplet-{self.aggregation}", "prior": self.prior_.tolist(),
                "accuracies": self.accuracies_.tolist(), "n_fallback": self.n_fallback_}


def _symmetric_posterior(lm, accuracies, prior):
    S = _signed_votes(lm)
    acc = np.asarray(accuracies, dtype=np.float64)
    log_odds = np.log(prior[1] / prior[0]) + S @ np.log(acc / (1.0 - acc))
    p2 = expit(log_odds)
    return np.column_stack([1.0 - p2, p2])


def triplet_fit(lm: LabelMatrix, prior=None, aggregation: str = "mean") -> TripletLabelModel:
    return TripletLabelModel(aggregation=aggregation, prior=prior).fit(lm)


def triplet_posterior(est: TripletLabelModel, lm: LabelMatrix, prior=None) -> np.ndarray:
    if prior is None:
        return est.predict_proba(lm)
    return _symmetric_posterior(check_label_matrix(lm, 2), est.accuracies_, check_prior(prior, 2))


def export_json(model, path):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
