"""Label matrices, datasets, file ingestion and synthetic generators.

Votes follow the usual weak-supervision convention: ``0`` is an abstain and
classes are ``1..C``.  Everything numeric is float64.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LabelMatrix",
    "Dataset",
    "SyntheticLFSpec",
    "load_label_matrix",
    "save_label_matrix",
    "load_probabilistic_matrix",
    "save_probabilistic_matrix",
    "load_features",
    "load_labels",
    "save_features",
    "save_labels",
    "one_hot",
    "coverage",
    "format_coverage",
    "covered_subset",
    "votes_from_one_hot",
    "generate_blobs",
    "generate_lfs",
]


@dataclass(frozen=True)
class LabelMatrix:
    """N x m labeling-function votes.

    ``probabilistic`` (N x m x C), when given, replaces the discrete view for
    everything downstream of :func:`one_hot`.
    """

    votes: np.ndarray
    num_classes: int
    probabilistic: np.ndarray | None = None

    def __post_init__(self):
        votes = np.asarray(self.votes)
        if votes.ndim != 2:
            raise ValueError(f"votes must be 2-D, got shape {votes.shape}")
        if votes.size and not np.issubdtype(votes.dtype, np.integer):
            if not np.all(np.equal(np.mod(votes, 1), 0)):
                raise ValueError("votes must be integers")
        votes = votes.astype(np.int64)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if votes.size and (votes.min() < 0 or votes.max() > self.num_classes):
            raise ValueError(
                f"vote out of range: votes must lie in 0..{self.num_classes}, "
                f"found {votes.min()}..{votes.max()}"
            )
        votes.setflags(write=False)
        object.__setattr__(self, "votes", votes)

        if self.probabilistic is not None:
            probs = np.asarray(self.probabilistic, dtype=np.float64)
            expected = votes.shape + (self.num_classes,)
            if probs.shape != expected:
                raise ValueError(f"probabilistic tensor has shape {probs.shape}, expected {expected}")
            if np.any(probs < 0) or np.any(probs > 1):
                raise ValueError("probabilistic entries must lie in [0, 1]")
            if np.any(probs.sum(axis=2) > 1 + 1e-9):
                raise ValueError("probabilistic slices must sum to at most 1")
            probs.setflags(write=False)
            object.__setattr__(self, "probabilistic", probs)

    @classmethod
    def from_probabilistic(cls, probs) -> "LabelMatrix":
        """Build from an N x m x C tensor; the discrete view is the argmax (0 for all-zero slices)."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ValueError(f"probabilistic tensor must be 3-D, got shape {probs.shape}")
        return cls(votes_from_one_hot(probs), probs.shape[2], probs)

    @property
    def n_samples(self) -> int:
        return self.votes.shape[0]

    @property
    def n_lfs(self) -> int:
        return self.votes.shape[1]

    @property
    def is_probabilistic(self) -> bool:
        return self.probabilistic is not None

    def covered_mask(self) -> np.ndarray:
        if self.probabilistic is not None:
            return np.any(self.probabilistic > 0, axis=(1, 2))
        return np.any(self.votes != 0, axis=1)

    def take(self, rows) -> "LabelMatrix":
        rows = np.asarray(rows)
        probs = None if self.probabilistic is None else self.probabilistic[rows]
        return LabelMatrix(self.votes[rows], self.num_classes, probs)

    def with_columns(self, columns) -> "LabelMatrix":
        """Append discrete vote columns (N x k) on the right."""
        columns = np.asarray(columns, dtype=np.int64).reshape(self.n_samples, -1)
        if self.probabilistic is not None:
            raise ValueError("cannot append discrete columns to a probabilistic matrix")
        return LabelMatrix(np.hstack([self.votes, columns]), self.num_classes)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None
    class_balance: np.ndarray
    train: np.ndarray
    val: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        n = X.shape[0]
        X.setflags(write=False)
        object.__setattr__(self, "features", X)

        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64).ravel()
            if y.shape[0] != n:
                raise ValueError(f"{y.shape[0]} labels for {n} samples")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)

        balance = np.asarray(self.class_balance, dtype=np.float64).ravel()
        if np.any(balance < 0) or abs(balance.sum() - 1.0) > 1e-9:
            raise ValueError("class_balance must be non-negative and sum to 1")
        if self.labels is not None and balance.size and self.labels.size:
            if self.labels.min() < 1 or self.labels.max() > balance.size:
                raise ValueError(f"labels must lie in 1..{balance.size}")
        object.__setattr__(self, "class_balance", balance)

        seen = np.zeros(n, dtype=bool)
        for name in ("train", "val", "test"):
            idx = np.asarray(getattr(self, name), dtype=np.int64).ravel()
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} split indices out of range [0, {n})")
            if np.any(seen[idx]) or np.unique(idx).size != idx.size:
                raise ValueError(f"{name} split overlaps another split")
            seen[idx] = True
            idx.setflags(write=False)
            object.__setattr__(self, name, idx)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_balance.size

    def split_features(self, name: str) -> np.ndarray:
        return self.features[getattr(self, name)]

    def split_labels(self, name: str) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return self.labels[getattr(self, name)]

    def replace_split(self, **splits) -> "Dataset":
        kw = dict(features=self.features, labels=self.labels, class_balance=self.class_balance,
                  train=self.train, val=self.val, test=self.test)
        kw.update(splits)
        return Dataset(**kw)


_MODES = ("independent", "random", "region", "duplicate", "adversarial-flip")


@dataclass(frozen=True)
class SyntheticLFSpec:
    """Recipe for one synthetic labeling function.

    ``mode`` is one of ``independent`` (accuracy/coverage noise model),
    ``random`` (votes drawn from the class balance, independent of y),
    ``region`` (votes ``target`` on a ball in feature space, so its errors
    depend on x the way a keyword heuristic's would),
    ``duplicate`` (copy of column ``source``) or ``adversarial-flip``
    (column ``source`` with its abstains turned into the opposite vote).
    """

    accuracy: float = 1.0
    coverage: float = 1.0
    mode: str = "independent"
    source: int | None = None
    target: int | None = None
    offset: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {self.accuracy}")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError(f"coverage must lie in (0, 1], got {self.coverage}")
        if self.mode not in _MODES:
            raise ValueError(f"unknown LF mode {self.mode!r}; expected one of {_MODES}")
        if self.mode in ("duplicate", "adversarial-flip") and self.source is None:
            raise ValueError(f"mode {self.mode!r} needs a source column")
        if self.offset is not None and self.offset < 0:
            raise ValueError(f"offset must be non-negative, got {self.offset}")

    @classmethod
    def duplicate_of(cls, source: int) -> "SyntheticLFSpec":
        return cls(mode="duplicate", source=source)

    @classmethod
    def adversarial_flip_of(cls, source: int) -> "SyntheticLFSpec":
        return cls(mode="adversarial-flip", source=source)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "coverage": self.coverage,
                "mode": self.mode, "source": self.source, "target": self.target,
                "offset": self.offset}


# ---------------------------------------------------------------------------
# files

def _read_int_rows(path) -> list[list[int]]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([int(cell) for cell in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
    return rows


def load_label_matrix(path, num_classes: int | None = None) -> LabelMatrix:
    """Read a headerless CSV of integer votes.  ``num_classes`` defaults to the max vote."""
    rows = _read_int_rows(path)
    if not rows:
        raise ValueError(f"{path}: no rows")
    width = len(rows[0])
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise ValueError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
    votes = np.array(rows, dtype=np.int64)
    if num_classes is None:
        num_classes = max(int(votes.max()), 2)
    return LabelMatrix(votes, num_classes)


def save_label_matrix(lm: LabelMatrix, path) -> None:
    np.savetxt(path, lm.votes, fmt="%d", delimiter=",")


def load_probabilistic_matrix(path) -> LabelMatrix:
    with open(path) as fh:
        data = json.load(fh)
    probs = np.asarray(data, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] == 0:
        raise ValueError(f"{path}: expected a non-empty [N][m][C] array")
    return LabelMatrix.from_probabilistic(probs)


def save_probabilistic_matrix(lm: LabelMatrix, path) -> None:
    with open(path, "w") as fh:
        json.dump(one_hot(lm).tolist(), fh)


def load_features(path) -> np.ndarray:
    X = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if X.size == 0:
        raise ValueError(f"{path}: no rows")
    return X


def load_labels(path) -> np.ndarray:
    rows = _read_int_rows(path)
    if not rows:
        raise ValueError(f"{path}: no rows")
    if any(len(r) != 1 for r in rows):
        raise ValueError(f"{path}: expected one label per row")
    return np.array([r[0] for r in rows], dtype=np.int64)


def save_features(X, path) -> None:
    np.savetxt(path, np.asarray(X), delimiter=",", fmt="%.17g")


def save_labels(y, path) -> None:
    np.savetxt(path, np.asarray(y), fmt="%d")


# ---------------------------------------------------------------------------
# views

def one_hot(lm: LabelMatrix) -> np.ndarray:
    """The N x m x C vote tensor; abstains are all-zero slices."""
    if lm.probabilistic is not None:
        return lm.probabilistic
    n, m = lm.votes.shape
    out = np.zeros((n, m, lm.num_classes + 1))
    np.put_along_axis(out, lm.votes[:, :, None], 1.0, axis=2)
    return out[:, :, 1:]


def votes_from_one_hot(tensor) -> np.ndarray:
    """Inverse of :func:`one_hot`: argmax class, 0 where the slice carries no mass."""
    tensor = np.asarray(tensor)
    votes = tensor.argmax(axis=2) + 1
    votes[tensor.max(axis=2) <= 0] = 0
    return votes.astype(np.int64)


def coverage(lm: LabelMatrix) -> float:
    """Fraction of rows with at least one non-abstain vote."""
    if lm.n_samples == 0:
        return 0.0
    return float(lm.covered_mask().mean())


def format_coverage(lm: LabelMatrix) -> str:
    """Coverage as a percentage with one decimal, e.g. ``"25.8"``."""
    return f"{100.0 * coverage(lm):.1f}"


def covered_subset(lm: LabelMatrix, ds: Dataset) -> tuple[LabelMatrix, Dataset]:
    """Drop uncovered rows from the training split; val/test are left alone."""
    if lm.n_samples != ds.n_samples:
        raise ValueError(f"label matrix has {lm.n_samples} rows but dataset has {ds.n_samples}")
    covered = lm.covered_mask()
    train = ds.train[covered[ds.train]]
    if train.size == 0:
        raise ValueError("empty training set: no training row has a vote")
    if train.size == ds.train.size:
        return lm, ds
    return lm, ds.replace_split(train=train)


# ---------------------------------------------------------------------------
# generators

def _simplex_centers(num_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    if dim < num_classes - 1:
        raise ValueError(f"need d >= C - 1 to place equidistant centers (d={dim}, C={num_classes})")
    # regular simplex: e_c - mean has pairwise distance sqrt(2)
    eye = np.eye(num_classes)
    verts = (eye - eye.mean(axis=0)) * (separation / np.sqrt(2.0))
    # orthonormal basis of the zero-sum subspace
    basis = np.linalg.svd(eye - eye.mean(axis=0))[2][: num_classes - 1]
    coords = verts @ basis.T
    embed = np.zeros((num_classes, dim))
    embed[:, : num_classes - 1] = coords
    rotation, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return embed @ rotation


def _split_counts(n: int, split) -> tuple[int, int, int]:
    split = tuple(split)
    if len(split) != 3:
        raise ValueError("split must have three entries (train, val, test)")
    if all(isinstance(s, (int, np.integer)) for s in split) and sum(split) == n:
        return tuple(int(s) for s in split)
    frac = np.asarray(split, dtype=np.float64)
    if np.any(frac < 0) or abs(frac.sum() - 1.0) > 1e-9:
        raise ValueError("split must be counts summing to n or fractions summing to 1")
    n_val = int(round(frac[1] * n))
    n_test = int(round(frac[2] * n))
    return n - n_val - n_test, n_val, n_test


def generate_blobs(n: int, d: int, num_classes: int = 2, separation: float = 6.0,
                   balance=None, seed: int = 0, split=(0.7, 0.1, 0.2)) -> Dataset:
    """One unit-covariance Gaussian per class, centers pairwise ``separation`` apart."""
    if n < num_classes:
        raise ValueError(f"n must be >= number of classes ({n} < {num_classes})")
    if d < 1:
        raise ValueError("d must be >= 1")
    if balance is None:
        balance = np.full(num_classes, 1.0 / num_classes)
    balance = np.asarray(balance, dtype=np.float64)
    if balance.shape != (num_classes,) or np.any(balance < 0) or abs(balance.sum() - 1) > 1e-9:
        raise ValueError("balance must be num_classes non-negative reals summing to 1")

    rng = np.random.default_rng(seed)
    centers = _simplex_centers(num_classes, d, separation, rng)
    labels = rng.choice(num_classes, size=n, p=balance) + 1
    X = centers[labels - 1] + rng.standard_normal((n, d))
    n_train, n_val, _ = _split_counts(n, split)
    order = rng.permutation(n)
    return Dataset(X, labels, balance, train=np.sort(order[:n_train]),
                   val=np.sort(order[n_train:n_train + n_val]),
                   test=np.sort(order[n_train + n_val:]))


def _region_lf(X, y, target, acc, cov, rng, offset=None, iters: int = 40):
    """Vote ``target`` on the ``cov`` fraction of rows nearest an anchor point.

    The anchor starts at the target class mean (plus a random sideways
    offset, of norm ``offset`` when given) and is slid toward the nearest other class mean until the
    empirical accuracy of the fired rows drops to ``acc``.  Errors are thus
    tied to a region of feature space rather than drawn independently.
    """
    n = X.shape[0]
    classes = np.unique(y)
    means = {c: X[y == c].mean(axis=0) for c in classes}
    mu = means[target]
    others = [c for c in classes if c != target]
    if not others:
        raise ValueError("region LFs need at least two classes present in the labels")
    nearest = min(others, key=lambda c: np.linalg.norm(means[c] - mu))
    toward = means[nearest] - mu
    side = rng.standard_normal(X.shape[1])
    side -= (side @ toward) / (toward @ toward) * toward
    size = rng.uniform(0.0, 1.5) if offset is None else offset
    side *= size / (np.linalg.norm(side) or 1.0)
    k = max(1, int(round(cov * n)))

    def fire_at(t):
        anchor = mu + side + t * toward
        d = ((X - anchor) ** 2).sum(axis=1)
        fired = np.zeros(n, dtype=bool)
        fired[np.argsort(d, kind="stable")[:k]] = True
        return fired

    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = (lo + hi) / 2
        if np.mean(y[fire_at(mid)] == target) > acc:
            lo = mid
        else:
            hi = mid
    return np.where(fire_at(lo), target, 0)


def generate_lfs(ds: Dataset, specs, seed: int = 0) -> LabelMatrix:
    """Sample one vote column per spec over every row of ``ds``."""
    if ds.labels is None:
        raise ValueError("generate_lfs needs a dataset with labels")
    C = ds.num_classes
    y = ds.labels
    n = y.shape[0]
    rng = np.random.default_rng(seed)
    cols: list[np.ndarray] = []
    for j, spec in enumerate(specs):
        if spec.mode in ("duplicate", "adversarial-flip"):
            if not 0 <= spec.source < j:
                raise ValueError(f"LF {j}: source {spec.source} must reference an earlier LF")
            col = cols[spec.source].copy()
            if spec.mode == "adversarial-flip":
                if C != 2:
                    raise ValueError("adversarial-flip LFs are only defined for binary tasks")
                fired = col[col != 0]
                if fired.size and np.any(fired != fired[0]):
                    flip_to = 1  # source votes both ways: fill abstains with class 1
                else:
                    flip_to = 3 - (fired[0] if fired.size else 2)
                col[col == 0] = flip_to
        elif spec.mode == "region":
            target = spec.target if spec.target is not None else int(rng.integers(1, C + 1))
            col = _region_lf(ds.features, y, target, spec.accuracy, spec.coverage, rng,
                              offset=spec.offset)
        elif spec.mode == "random":
            fire = rng.random(n) < spec.coverage
            col = np.where(fire, rng.choice(C, size=n, p=ds.class_balance) + 1, 0)
        else:
            fire = rng.random(n) < spec.coverage
            correct = rng.random(n) < spec.accuracy
            wrong = (y - 1 + rng.integers(1, C, size=n)) % C + 1
            col = np.where(fire, np.where(correct, y, wrong), 0)
        cols.append(col.astype(np.int64))
    votes = np.column_stack(cols) if cols else np.zeros((n, 0), dtype=np.int64)
    return LabelMatrix(votes, C)
