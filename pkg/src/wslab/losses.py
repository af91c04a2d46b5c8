"""Agreement losses between downstream predictions and encoder soft labels.

Every loss takes the two networks' logits (``zf`` for the downstream model,
``ze`` for the encoder posterior, both B x C), and returns the batch-mean value
together with the gradient that each network should receive.  For the
stop-grad losses those are *not* the gradient of the returned value: each
network only sees the term in which it is the prediction.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .nn import log_softmax, softmax, softmax_backward

__all__ = [
    "LossOutput",
    "LOSSES",
    "get_loss",
    "cross_entropy",
    "cross_entropy_grads",
    "cross_entropy_pred_grad",
    "symmetric_ce_terms",
    "sym_ce_stopgrad",
    "ce_no_stopgrad",
    "asymmetric_ce",
    "l1_loss",
    "squared_hellinger",
    "mig_value",
    "mig_grads",
    "mig_loss",
]

PROB_FLOOR = 1e-12
_LOG_FLOOR = np.log(PROB_FLOOR)


class LossOutput(NamedTuple):
    value: float
    grad_f: np.ndarray
    grad_e: np.ndarray


def _clamped_log_probs(z):
    ls = log_softmax(z)
    mask = ls > _LOG_FLOOR
    return np.where(mask, ls, _LOG_FLOOR), mask


def cross_entropy(z_pred, q_target) -> float:
    """Batch mean of ``-sum_c q_c log p_c`` with p = softmax(z_pred) clamped at 1e-12."""
    logp, _ = _clamped_log_probs(z_pred)
    return float(-(q_target * logp).sum(axis=1).mean())


def cross_entropy_pred_grad(z_pred, q_target) -> np.ndarray:
    """Gradient of :func:`cross_entropy` w.r.t. the prediction logits, target held fixed."""
    _, mask = _clamped_log_probs(z_pred)
    g_ls = -q_target * mask / z_pred.shape[0]
    return g_ls - softmax(z_pred) * g_ls.sum(axis=1, keepdims=True)


def cross_entropy_grads(z_pred, z_target):
    """Gradients of ``cross_entropy(z_pred, softmax(z_target))`` w.r.t. both logit arrays."""
    logp, _ = _clamped_log_probs(z_pred)
    q = softmax(z_target)
    d_pred = cross_entropy_pred_grad(z_pred, q)
    d_target = softmax_backward(q, -logp / z_pred.shape[0])
    return d_pred, d_target


def symmetric_ce_terms(zf, ze):
    """Per-term gradients of CE(y_f, y_e) + CE(y_e, y_f).

    Returns ``{(term, net): grad}`` with term in {1, 2} and net in {"f", "e"}.
    Term 1 uses y_f as the prediction, term 2 uses y_e.
    """
    d1_f, d1_e = cross_entropy_grads(zf, ze)
    d2_e, d2_f = cross_entropy_grads(ze, zf)
    return {(1, "f"): d1_f, (1, "e"): d1_e, (2, "f"): d2_f, (2, "e"): d2_e}


def _sym_value(zf, ze):
    return cross_entropy(zf, softmax(ze)) + cross_entropy(ze, softmax(zf))


def sym_ce_stopgrad(zf, ze, prior=None) -> LossOutput:
    d_f, _ = cross_entropy_grads(zf, ze)
    d_e, _ = cross_entropy_grads(ze, zf)
    return LossOutput(_sym_value(zf, ze), d_f, d_e)


def ce_no_stopgrad(zf, ze, prior=None) -> LossOutput:
    """Symmetric cross-entropy with gradients through the targets as well."""
    t = symmetric_ce_terms(zf, ze)
    return LossOutput(_sym_value(zf, ze), t[1, "f"] + t[2, "f"], t[1, "e"] + t[2, "e"])


def asymmetric_ce(zf, ze, prior=None) -> LossOutput:
    """Plain CE(y_f, y_e) differentiated through both arguments."""
    d_f, d_e = cross_entropy_grads(zf, ze)
    return LossOutput(cross_entropy(zf, softmax(ze)), d_f, d_e)


def l1_loss(zf, ze, prior=None) -> LossOutput:
    pf, pe = softmax(zf), softmax(ze)
    B = zf.shape[0]
    diff = pf - pe
    sign = np.sign(diff) / B
    return LossOutput(float(np.abs(diff).sum(axis=1).mean()),
                      softmax_backward(pf, sign), softmax_backward(pe, -sign))


def squared_hellinger(zf, ze, prior=None) -> LossOutput:
    pf = np.maximum(softmax(zf), PROB_FLOOR)
    pe = np.maximum(softmax(ze), PROB_FLOOR)
    B = zf.shape[0]
    root = np.sqrt(pf * pe)
    value = float((1.0 - root.sum(axis=1)).mean())
    return LossOutput(value,
                      softmax_backward(softmax(zf), -0.5 * root / pf / B),
                      softmax_backward(softmax(ze), -0.5 * root / pe / B))


def mig_value(pf, pe, prior) -> float:
    """Negated batch estimate of the mutual-information gain between the two views."""
    n = pf.shape[0]
    if n < 2:
        raise ValueError("the MIG estimator needs a batch of at least 2 samples")
    K = (pf / prior) @ pe.T
    diag = np.maximum(np.diag(K), PROB_FLOOR)
    off = (K.sum() - np.trace(K)) / (n * (n - 1))
    return float(-(np.log(diag).mean() - off + 1.0))


def mig_grads(pf, pe, prior):
    """Gradients of :func:`mig_value` w.r.t. the two probability arrays."""
    n = pf.shape[0]
    K_diag = np.maximum(np.einsum("ic,ic->i", pf / prior, pe), PROB_FLOOR)
    g_f = -((pe / prior) / K_diag[:, None] / n - (pe.sum(axis=0) - pe) / prior / (n * (n - 1)))
    g_e = -((pf / prior) / K_diag[:, None] / n - (pf.sum(axis=0) - pf) / prior / (n * (n - 1)))
    return g_f, g_e


def mig_loss(zf, ze, prior=None) -> LossOutput:
    """MIG in place of both CE terms, stop-grad kept on whichever side is the target."""
    C = zf.shape[1]
    prior = np.full(C, 1.0 / C) if prior is None else np.asarray(prior)
    pf, pe = softmax(zf), softmax(ze)
    value = 2.0 * mig_value(pf, pe, prior)
    g_f, g_e = mig_grads(pf, pe, prior)
    return LossOutput(value, softmax_backward(pf, g_f), softmax_backward(pe, g_e))


LOSSES = {
    "sym_ce": sym_ce_stopgrad,
    "ce_no_stopgrad": ce_no_stopgrad,
    "asym_ce": asymmetric_ce,
    "l1": l1_loss,
    "hellinger": squared_hellinger,
    "mig": mig_loss,
}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None
