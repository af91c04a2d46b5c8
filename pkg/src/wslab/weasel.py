"""End-to-end weak supervision: an encoder that turns LF votes (and features)
into sample-dependent accuracy scores, trained jointly with a downstream
classifier by making the two agree.

The encoder's soft label for one sample is

    theta = tau2 * softmax(tau1 * e(votes, x))          (over the LF axis)
    s_c   = sum_j theta_j * onehot(votes)_jc
    y_e   = normalize(softmax(s) * prior)

and the downstream model ``f`` only ever sees features, so it can label
samples no LF covers.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import (
    check_consistent_length,
    check_features,
    check_is_fitted,
    check_label_matrix,
    check_prior,
    soft_targets,
)
from .data import Dataset, LabelMatrix, covered_subset, one_hot
from .losses import cross_entropy, cross_entropy_pred_grad, get_loss
from .metrics import accuracy, multiclass_auc
from .nn import MLP, Adam, softmax, softmax_backward

__all__ = [
    "ACCURACY_FUNCTIONS",
    "TrainingError",
    "accuracy_scores",
    "accuracy_scores_backward",
    "aggregate_votes",
    "EncoderHead",
    "WeaselClassifier",
    "SoftLabelClassifier",
    "TrainConfig",
    "train",
    "predict",
]

logger = logging.getLogger(__name__)

ACCURACY_FUNCTIONS = ("softmax", "sigmoid", "relu", "tanh")
RELU_FLOOR = 1e-5


class TrainingError(RuntimeError):
    pass


def accuracy_scores(raw, tau1: float = 1.0, tau2: float = 1.0, kind: str = "softmax") -> np.ndarray:
    """Map raw encoder outputs (B x m, or B x m x C) to accuracy scores.

    ``softmax`` normalizes over the LF axis (axis 1), so each sample's
    scores sum to ``tau2``; the other kinds act elementwise and exist for
    ablations.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if kind == "softmax":
        return tau2 * softmax(raw, tau1, axis=1)
    if kind == "sigmoid":
        return tau2 * expit(tau1 * raw)
    if kind == "relu":
        return tau2 * (np.maximum(tau1 * raw, 0.0) + RELU_FLOOR)
    if kind == "tanh":
        return tau2 * np.tanh(tau1 * raw)
    raise ValueError(f"unknown accuracy function {kind!r}; expected one of {ACCURACY_FUNCTIONS}")


def accuracy_scores_backward(raw, theta, dtheta, tau1: float = 1.0, tau2: float = 1.0,
                             kind: str = "softmax") -> np.ndarray:
    if kind == "softmax":
        if tau1 == 0:
            return np.zeros_like(raw)
        return tau1 * softmax_backward(theta / tau2, tau2 * dtheta, axis=1)
    if kind == "sigmoid":
        s = theta / tau2
        return tau1 * tau2 * s * (1.0 - s) * dtheta
    if kind == "relu":
        return tau1 * tau2 * (tau1 * raw > 0) * dtheta
    if kind == "tanh":
        t = theta / tau2
        return tau1 * tau2 * (1.0 - t * t) * dtheta
    raise ValueError(f"unknown accuracy function {kind!r}")


def aggregate_votes(theta, lam_bar) -> np.ndarray:
    """Accuracy-weighted vote sums s (B x C).

    With class-conditional scores (theta of shape B x m x C) this is the
    column sum of the elementwise product.
    """
    if theta.ndim == 3:
        return (theta * lam_bar).sum(axis=1)
    return np.einsum("bm,bmc->bc", theta, lam_bar)


def _posterior_from_logits(s, prior):
    p = softmax(s) * prior
    return p / p.sum(axis=1, keepdims=True)


class EncoderHead:
    """MLP over ``[flatten(votes), x]`` followed by the accuracy-score transform."""

    def __init__(self, n_lfs: int, n_classes: int, n_features: int, *, hidden=(70, 70),
                 tau1: float = 1.0, tau2: float | None = None, accuracy: str = "softmax",
                 class_conditional: bool = False, use_features: bool = True,
                 batchnorm: bool = True, dropout: float = 0.0, seed=None):
        if accuracy not in ACCURACY_FUNCTIONS:
            raise ValueError(f"unknown accuracy function {accuracy!r}; expected one of {ACCURACY_FUNCTIONS}")
        if tau1 < 0:
            raise ValueError(f"tau1 must be non-negative, got {tau1}")
        self.n_lfs, self.n_classes, self.n_features = n_lfs, n_classes, n_features
        self.tau1 = float(tau1)
        self.tau2 = float(np.sqrt(n_lfs) if tau2 is None else tau2)
        if self.tau2 <= 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        self.accuracy = accuracy
        self.class_conditional = class_conditional
        self.use_features = use_features
        in_dim = n_lfs * n_classes + (n_features if use_features else 0)
        out_dim = n_lfs * n_classes if class_conditional else n_lfs
        self.body = MLP(in_dim, hidden, out_dim, batchnorm=batchnorm, dropout=dropout, seed=seed)

    def inputs(self, lam_bar, X) -> np.ndarray:
        flat = lam_bar.reshape(lam_bar.shape[0], -1)
        return np.hstack([flat, X]) if self.use_features else flat

    def _uniform(self) -> bool:
        return self.tau1 == 0 and self.accuracy == "softmax"

    def scores(self, lam_bar, X, *, train: bool = False, inputs=None) -> np.ndarray:
        """Accuracy scores theta (B x m, or B x m x C)."""
        raw = self.body.forward(self.inputs(lam_bar, X) if inputs is None else inputs, train=train)
        if self.class_conditional:
            raw = raw.reshape(-1, self.n_lfs, self.n_classes)
        self._raw = raw
        self._theta = accuracy_scores(raw, self.tau1, self.tau2, self.accuracy)
        self._lam = lam_bar
        return self._theta

    def logits(self, lam_bar, X, *, train: bool = False, inputs=None) -> np.ndarray:
        """Vote logits s (B x C), before the prior is applied."""
        if self._uniform() and not train:
            return (self.tau2 / self.n_lfs) * lam_bar.sum(axis=1)
        theta = self.scores(lam_bar, X, train=train, inputs=inputs)
        return aggregate_votes(theta, lam_bar)

    def posterior(self, lam_bar, X, prior=None) -> np.ndarray:
        """Soft labels y_e; eval mode."""
        prior = check_prior(prior, self.n_classes)
        return _posterior_from_logits(self.logits(lam_bar, X), prior)

    def backward(self, d_logits):
        """Accumulate body gradients given dL/ds (B x C)."""
        if self.class_conditional:
            dtheta = d_logits[:, None, :] * self._lam
        else:
            dtheta = np.einsum("bc,bmc->bm", d_logits, self._lam)
        draw = accuracy_scores_backward(self._raw, self._theta, dtheta, self.tau1, self.tau2, self.accuracy)
        self.body.backward(draw.reshape(draw.shape[0], -1))

    def to_dict(self) -> dict:
        return {
            "n_lfs": self.n_lfs, "n_classes": self.n_classes, "n_features": self.n_features,
            "tau1": self.tau1, "tau2": self.tau2, "accuracy": self.accuracy,
            "class_conditional": self.class_conditional, "use_features": self.use_features,
            "body": self.body.to_dict(),
        }


def encoder_posterior(enc: EncoderHead, lam_bar, X, prior=None) -> np.ndarray:
    return enc.posterior(lam_bar, X, prior)


class _JointTrainer(ClassifierMixin, BaseEstimator):
    """Epoch loop, validation-based checkpointing and the downstream model ``f``."""

    def _make_downstream(self, n_features, n_classes, seed):
        return MLP(n_features, self.downstream_hidden, n_classes,
                   batchnorm=self.downstream_batchnorm, dropout=self.dropout, seed=seed)

    def _check_train_params(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.early_stopping not in ("auc", "accuracy", None):
            raise ValueError(f"early_stopping must be 'auc', 'accuracy' or None, got {self.early_stopping!r}")

    def _metric(self, kind, X, y):
        probs = self._predict_proba(X)
        if kind == "accuracy":
            return accuracy(probs.argmax(axis=1) + 1, y)
        return multiclass_auc(probs, y)

    def _nets(self):
        raise NotImplementedError

    def _run(self, n, step, eval_set, test_set, rng):
        if self.early_stopping is not None and eval_set is None:
            raise ValueError("early stopping needs an eval_set (X_val, y_val)")
        history = []
        nets = self._nets()
        best = [net.state() for net in nets]
        best_metric, best_epoch, stale = -np.inf, 0, 0
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(n)
            batches = [order[i:i + self.batch_size] for i in range(0, n, self.batch_size)]
            if len(batches) > 1 and batches[-1].size < 2:
                batches.pop()
            losses = []
            for b, idx in enumerate(batches):
                value = step(idx, epoch, b)
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                losses.append(value)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if eval_set is not None:
                row["val_metric"] = self._metric(self.early_stopping or "auc", *eval_set)
            if test_set is not None:
                row["test_metric"] = self._metric("auc", *test_set)
            history.append(row)
            if self.early_stopping is None:
                continue
            if row["val_metric"] > best_metric:
                best_metric, best_epoch, stale = row["val_metric"], epoch, 0
                best = [net.state() for net in nets]
            else:
                stale += 1
                if self.patience is not None and stale >= self.patience:
                    break
        if self.early_stopping is not None and history:
            for net, state in zip(nets, best):
                net.load_state(state)
        else:
            best_epoch = len(history)
            best_metric = history[-1].get("val_metric", np.nan) if history else np.nan
        self.history_ = history
        self.best_epoch_ = best_epoch
        self.best_val_metric_ = float(best_metric) if np.isfinite(best_metric) else None

    @staticmethod
    def _eval_pair(pair, n_features):
        if pair is None:
            return None
        X, y = pair
        X = check_features(X, n_features)
        y = np.asarray(y, dtype=np.int64).ravel()
        check_consistent_length(X, y)
        return X, y

    def _predict_proba(self, X):
        return softmax(self.downstream_.forward(X, train=False))

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities from the downstream model (columns are classes 1..C)."""
        check_is_fitted(self, "downstream_")
        return self._predict_proba(check_features(X, self.n_features_in_))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "downstream_")
        return self.downstream_.forward(check_features(X, self.n_features_in_), train=False)

    def history_jsonl(self) -> str:
        check_is_fitted(self, "history_")
        return "".join(json.dumps(row) + "\n" for row in self.history_)


class WeaselClassifier(_JointTrainer):
    """Downstream classifier trained end-to-end from labeling-function votes.

    ``fit(X, L)`` takes features and the label matrix (votes 0..C, 0 =
    abstain; or an N x m x C probability tensor).  Ground-truth labels are
    only used through ``eval_set``/``test_set`` for model selection and
    monitoring.

    Parameters follow the reference setup: encoder hidden sizes (70, 70)
    with batch norm, downstream (50, 50, 25), Adam with L2 decay 7e-7,
    dropout 0.3, batch size 64, at most 150 epochs with checkpointing on
    validation AUC.  ``tau2=None`` means sqrt(m).  ``train_encoder=False``
    keeps the encoder at its random initialization.
    """

    def __init__(self, *, encoder_hidden=(70, 70), downstream_hidden=(50, 50, 25), tau1=1.0,
                 tau2=None, accuracy="softmax", class_conditional=False, use_features=True,
                 loss="sym_ce", lr=1e-4, weight_decay=7e-7, dropout=0.3, batch_size=64,
                 max_epochs=150, early_stopping="auc", patience=None, encoder_batchnorm=True,
                 downstream_batchnorm=False, prior=None, train_encoder=True, n_classes=None,
                 random_state=0):
        self.encoder_hidden = encoder_hidden
        self.downstream_hidden = downstream_hidden
        self.tau1 = tau1
        self.tau2 = tau2
        self.accuracy = accuracy
        self.class_conditional = class_conditional
        self.use_features = use_features
        self.loss = loss
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stopping = early_stopping
        self.patience = patience
        self.encoder_batchnorm = encoder_batchnorm
        self.downstream_batchnorm = downstream_batchnorm
        self.prior = prior
        self.train_encoder = train_encoder
        self.n_classes = n_classes
        self.random_state = random_state

    def _nets(self):
        return [self.downstream_, self.encoder_.body]

    def _build(self, n_features, n_lfs, n_classes):
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        self.encoder_ = EncoderHead(
            n_lfs, n_classes, n_features, hidden=self.encoder_hidden, tau1=self.tau1, tau2=self.tau2,
            accuracy=self.accuracy, class_conditional=self.class_conditional,
            use_features=self.use_features, batchnorm=self.encoder_batchnorm, dropout=self.dropout,
            seed=seeds[0])
        self.downstream_ = self._make_downstream(n_features, n_classes, seeds[1])
        self.n_features_in_ = n_features
        self.n_lfs_ = n_lfs
        self.classes_ = np.arange(1, n_classes + 1)
        self.prior_ = check_prior(self.prior, n_classes)
        self.tau2_ = self.encoder_.tau2
        return np.random.default_rng(seeds[2])

    def fit(self, X, L, *, eval_set=None, test_set=None, batch_hook=None):
        """Train encoder and downstream model jointly.

        ``eval_set=(X_val, y_val)`` drives checkpoint selection; ``test_set``
        is only recorded in ``history_``.  ``batch_hook(info)`` is called after
        every loss evaluation with the batch logits and the loss output.
        Rows of ``L`` without any vote are dropped before training.
        """
        self._check_train_params()
        get_loss(self.loss)
        X = check_features(X)
        lm = check_label_matrix(L, self.n_classes)
        check_consistent_length(X, lm.votes)
        covered = lm.covered_mask()
        if not covered.any():
            raise ValueError("empty training set: no row has a vote")
        X, lm = X[covered], lm.take(np.flatnonzero(covered))

        rng = self._build(X.shape[1], lm.n_lfs, lm.num_classes)
        eval_set = self._eval_pair(eval_set, X.shape[1])
        test_set = self._eval_pair(test_set, X.shape[1])
        lam = one_hot(lm)
        enc_in = self.encoder_.inputs(lam, X)
        loss_fn = get_loss(self.loss)
        log_prior = np.log(self.prior_)
        f, enc = self.downstream_, self.encoder_
        opt_f = Adam(f.n_params, lr=self.lr, weight_decay=self.weight_decay)
        opt_e = Adam(enc.body.n_params, lr=self.lr, weight_decay=self.weight_decay)

        def step(idx, epoch, b):
            zf = f.forward(X[idx], train=True)
            s = enc.logits(lam[idx], X[idx], train=self.train_encoder, inputs=enc_in[idx])
            ze = s + log_prior
            out = loss_fn(zf, ze, self.prior_)
            if batch_hook is not None:
                batch_hook({"epoch": epoch, "batch": b, "zf": zf, "ze": ze, "loss": out})
            f.zero_grad()
            f.backward(out.grad_f)
            opt_f.step(f.params, f.grads)
            if self.train_encoder:
                enc.body.zero_grad()
                enc.backward(out.grad_e)
                opt_e.step(enc.body.params, enc.body.grads)
            return out.value

        self._run(X.shape[0], step, eval_set, test_set, rng)
        return self

    def encoder_posterior(self, X, L) -> np.ndarray:
        """Encoder soft labels y_e for covered or uncovered rows (uncovered rows get the prior)."""
        check_is_fitted(self, "encoder_")
        X = check_features(X, self.n_features_in_)
        lm = check_label_matrix(L, len(self.classes_))
        check_consistent_length(X, lm.votes)
        return self.encoder_.posterior(one_hot(lm), X, self.prior_)

    def accuracy_scores(self, X, L) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        X = check_features(X, self.n_features_in_)
        lm = check_label_matrix(L, len(self.classes_))
        return self.encoder_.scores(one_hot(lm), X)

    def save(self, path):
        check_is_fitted(self, "downstream_")
        with open(path, "w") as fh:
            json.dump({"params": {k: v for k, v in self.get_params().items()},
                       "downstream": self.downstream_.to_dict(),
                       "encoder": self.encoder_.to_dict(),
                       "prior": self.prior_.tolist(),
                       "best_epoch": self.best_epoch_}, fh, default=list)


class SoftLabelClassifier(_JointTrainer):
    """The downstream network alone, trained with cross-entropy on given targets.

    Targets may be hard labels (1..C) or soft rows (N x C).  Used for
    label-model baselines and for the fully supervised reference.
    """

    def __init__(self, *, downstream_hidden=(50, 50, 25), lr=1e-4, weight_decay=7e-7, dropout=0.3,
                 batch_size=64, max_epochs=150, early_stopping="auc", patience=None,
                 downstream_batchnorm=False, n_classes=None, random_state=0):
        self.downstream_hidden = downstream_hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stopping = early_stopping
        self.patience = patience
        self.downstream_batchnorm = downstream_batchnorm
        self.n_classes = n_classes
        self.random_state = random_state

    def _nets(self):
        return [self.downstream_]

    def fit(self, X, Y, *, eval_set=None, test_set=None):
        self._check_train_params()
        X = check_features(X)
        Q = soft_targets(Y, self.n_classes)
        check_consistent_length(X, Q)
        n_classes = Q.shape[1]
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        self.downstream_ = self._make_downstream(X.shape[1], n_classes, seeds[1])
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(1, n_classes + 1)
        rng = np.random.default_rng(seeds[2])
        f = self.downstream_
        opt = Adam(f.n_params, lr=self.lr, weight_decay=self.weight_decay)

        def step(idx, epoch, b):
            zf = f.forward(X[idx], train=True)
            f.zero_grad()
            f.backward(cross_entropy_pred_grad(zf, Q[idx]))
            opt.step(f.params, f.grads)
            return cross_entropy(zf, Q[idx])

        self._run(X.shape[0], step, self._eval_pair(eval_set, X.shape[1]),
                  self._eval_pair(test_set, X.shape[1]), rng)
        return self


# ---------------------------------------------------------------------------
# functional entry points

@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 7e-7
    dropout: float = 0.3
    batch_size: int = 64
    max_epochs: int = 150
    early_stopping: str | None = "auc"
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def train(model: WeaselClassifier, lm: LabelMatrix, ds: Dataset, cfg: TrainConfig | None = None,
          *, record_test: bool = False):
    """Fit ``model`` on the covered training rows of ``ds`` and return ``(model, history)``.

    Validation labels select the checkpoint; test labels are only read when
    ``record_test`` is set.
    """
    cfg = cfg or TrainConfig()
    lm, ds = covered_subset(lm, ds)
    model.set_params(lr=cfg.lr, weight_decay=cfg.weight_decay, dropout=cfg.dropout,
                     batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
                     early_stopping=cfg.early_stopping, patience=cfg.patience, random_state=cfg.seed,
                     n_classes=lm.num_classes)
    eval_set = None
    if cfg.early_stopping is not None:
        if ds.val.size == 0:
            raise ValueError("early stopping needs a non-empty validation split")
        eval_set = (ds.split_features("val"), ds.split_labels("val"))
    test_set = (ds.split_features("test"), ds.split_labels("test")) if record_test and ds.test.size else None
    model.fit(ds.split_features("train"), lm.take(ds.train), eval_set=eval_set, test_set=test_set)
    return model, model.history_


def predict(model: _JointTrainer, X) -> np.ndarray:
    return model.predict_proba(X)
