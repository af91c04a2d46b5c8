"""Synthetic robustness studies and the one-factor-at-a-time ablation grid.

Every experiment is a grid of cells ``(model, grid value, seed)``.  The
dataset and label matrix depend only on ``(master_seed, seed)`` so models in
the same replicate see identical inputs, and the base LF columns do not move
as duplicates are appended.  Model initialization and batch order are seeded
per cell, which keeps any single row reproducible on its own and makes the
tables independent of how cells are scheduled across workers.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, LabelMatrix, SyntheticLFSpec, generate_blobs, generate_lfs
from .labelmodels import MajorityVote, NaiveBayesEM, TripletLabelModel
from .metrics import evaluate
from .weasel import SoftLabelClassifier, WeaselClassifier

__all__ = [
    "KINDS",
    "MODELS",
    "ABLATION_AXES",
    "RobustnessSpec",
    "AblationConfig",
    "ResultsTable",
    "standard_lf_specs",
    "adversarial_base_specs",
    "build_label_matrix",
    "training_inputs",
    "run_robustness",
    "run_adversarial_duplication",
    "run_recovery",
    "run_independent_random",
    "run_benchmark",
    "run_ablation_grid",
    "ablation_variants",
    "preset",
    "PRESETS",
]

logger = logging.getLogger(__name__)

KINDS = ("adversarial-duplication", "random-duplication", "independent-random", "benchmark")
MODELS = ("weasel", "majority", "nb-em", "triplet-mean", "triplet-median", "supervised-ceiling")
MAX_DESK_COUNT = 100

# Collapse-avoiding preset for the adversarial study: a flatter softmax over LFs.
ROBUST_WEASEL = {"tau1": 1.0 / 3.0}


@dataclass(frozen=True)
class RobustnessSpec:
    """One robustness grid.

    ``duplicate_counts`` is the grid: adversarial duplicates, copies of the
    coin-flip LF, or independent coin-flip LFs depending on ``kind``.
    ``base_lf_specs=None`` draws the default LF set per replicate.
    ``weasel`` and ``downstream`` hold estimator parameter overrides.
    """

    kind: str
    duplicate_counts: tuple = (0,)
    models: tuple = ("weasel", "nb-em")
    seeds: tuple = (0, 1, 2, 3, 4)
    base_lf_specs: tuple | None = None
    master_seed: int = 0
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 2000
    n_features: int = 10
    separation: float = 6.0
    weasel: dict = field(default_factory=dict)
    downstream: dict = field(default_factory=dict)
    allow_large: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "duplicate_counts", tuple(int(k) for k in self.duplicate_counts))
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.base_lf_specs is not None:
            object.__setattr__(self, "base_lf_specs", tuple(
                s if isinstance(s, SyntheticLFSpec) else SyntheticLFSpec(**s) for s in self.base_lf_specs))
        if not self.duplicate_counts:
            raise ValueError("duplicate_counts must not be empty")
        if any(k < 0 for k in self.duplicate_counts):
            raise ValueError("duplicate counts must be non-negative")
        if not self.models:
            raise ValueError("at least one model is required")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ValueError(f"unknown models {unknown}; expected a subset of {MODELS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if min(self.n_train, self.n_val, self.n_test) < 2:
            raise ValueError("every split needs at least 2 rows")
        big = max(self.duplicate_counts)
        if big > MAX_DESK_COUNT:
            if not self.allow_large:
                raise ValueError(f"grid value {big} exceeds the desk-scale cap of {MAX_DESK_COUNT}; "
                                 "set allow_large to run it anyway")
            warnings.warn(f"grid value {big} is above the desk-scale cap; expect long runtimes",
                          RuntimeWarning, stacklevel=2)
        if len(self.seeds) < 3:
            warnings.warn("fewer than 3 seeds: medians are not meaningful", RuntimeWarning, stacklevel=2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["duplicate_counts"] = list(self.duplicate_counts)
        d["models"] = list(self.models)
        d["seeds"] = list(self.seeds)
        if self.base_lf_specs is not None:
            d["base_lf_specs"] = [s.to_dict() for s in self.base_lf_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RobustnessSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# seeds, data and LF sets

def _seed(master: int, *key) -> int:
    return int(np.random.SeedSequence(master, spawn_key=tuple(key)).generate_state(1)[0])


def standard_lf_specs(rng, n_lfs: int = 8, accuracy=(0.7, 0.85), coverage=(0.4, 0.9)) -> list:
    """Independent LFs with accuracy and coverage drawn uniformly from the given ranges."""
    acc = rng.uniform(*accuracy, size=n_lfs)
    cov = rng.uniform(*coverage, size=n_lfs)
    return [SyntheticLFSpec(accuracy=float(a), coverage=float(c)) for a, c in zip(acc, cov)]


def adversarial_base_specs(rng) -> list:
    """The standard LF set plus a narrow 80%-accurate region LF for class 2.

    The region LF is the source for the adversarial column: like a rare
    keyword, it fires on a small off-axis pocket of feature space, so the
    abstain-flipped copy mostly encodes "not in the pocket" rather than the
    class.
    """
    specs = standard_lf_specs(rng)
    specs.append(SyntheticLFSpec(accuracy=0.8, coverage=0.05, mode="region", target=2, offset=5.0))
    return specs


def _dataset(spec: RobustnessSpec, seed: int) -> Dataset:
    n = spec.n_train + spec.n_val + spec.n_test
    return generate_blobs(n, spec.n_features, 2, spec.separation, seed=_seed(spec.master_seed, seed, 0),
                          split=(spec.n_train, spec.n_val, spec.n_test))


def _lf_specs(spec: RobustnessSpec, seed: int, k: int) -> list:
    if spec.kind in ("adversarial-duplication", "benchmark"):
        if spec.base_lf_specs is not None:
            base = list(spec.base_lf_specs)
        else:
            rng = np.random.default_rng(_seed(spec.master_seed, seed, 1))
            base = adversarial_base_specs(rng) if spec.kind == "adversarial-duplication" else standard_lf_specs(rng)
        if spec.kind == "benchmark":
            return base
        src = len(base) - 1
        return base + [SyntheticLFSpec.adversarial_flip_of(src)] + \
            [SyntheticLFSpec.duplicate_of(src + 1)] * k
    base = list(spec.base_lf_specs) if spec.base_lf_specs is not None else [SyntheticLFSpec()]
    if spec.kind == "random-duplication":
        if k == 0:
            return base
        coin = len(base)
        return base + [SyntheticLFSpec(mode="random")] + [SyntheticLFSpec.duplicate_of(coin)] * (k - 1)
    return base + [SyntheticLFSpec(mode="random")] * k


def build_label_matrix(spec: RobustnessSpec, seed: int, k: int, ds: Dataset | None = None) -> LabelMatrix:
    """The full-dataset label matrix for grid value ``k`` of replicate ``seed``."""
    ds = ds if ds is not None else _dataset(spec, seed)
    return generate_lfs(ds, _lf_specs(spec, seed, k), seed=_seed(spec.master_seed, seed, 2))


# ---------------------------------------------------------------------------
# cells

def training_inputs(model: str, ds: Dataset, lm: LabelMatrix) -> dict:
    """Exactly what ``model`` may see when training.

    Ground-truth training labels go only to the supervised ceiling, which in
    turn never receives LF votes.  Validation labels drive checkpoint
    selection for every model.
    """
    inputs = {"X": ds.split_features("train"),
              "val": (ds.split_features("val"), ds.split_labels("val"))}
    if model == "supervised-ceiling":
        inputs["y"] = ds.split_labels("train")
    else:
        inputs["L"] = lm.take(ds.train)
    if model not in ("weasel", "supervised-ceiling"):
        inputs["prior"] = ds.class_balance
    return inputs


def _fit_model(model: str, inputs: dict, weasel_params: dict, downstream_params: dict, seed: int):
    X, val = inputs["X"], inputs["val"]
    if model == "weasel":
        return WeaselClassifier(**{**weasel_params, "random_state": seed}).fit(X, inputs["L"], eval_set=val)
    down = SoftLabelClassifier(**{**downstream_params, "random_state": seed})
    if model == "supervised-ceiling":
        return down.fit(X, inputs["y"], eval_set=val)
    L = inputs["L"]
    if model == "majority":
        targets = MajorityVote(prior=inputs["prior"], random_state=seed).fit(L).predict(L)
    elif model == "nb-em":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            targets = NaiveBayesEM(prior=inputs["prior"]).fit(L).predict_proba(L)
    else:
        agg = model.split("-", 1)[1]
        targets = TripletLabelModel(aggregation=agg, prior=inputs["prior"], random_state=seed) \
            .fit(L).predict_proba(L)
    covered = L.covered_mask()
    if not covered.any():
        raise ValueError("empty training set: no row has a vote")
    return down.fit(X[covered], targets[covered], eval_set=val)


def _resolve_weasel(params: dict, n_lfs: int) -> dict:
    out = dict(params)
    if out.get("tau2") == "m":
        out["tau2"] = float(n_lfs)
    elif out.get("tau2") == "sqrt_m":
        out["tau2"] = None
    return out


def _run_cell(task):
    spec, seed, k, model, label, weasel_params = task
    ds = _dataset(spec, seed)
    lm = build_label_matrix(spec, seed, k, ds)
    cell_seed = _seed(spec.master_seed, seed, 3, k, MODELS.index(model))
    if model.startswith("triplet") and lm.n_lfs < 3:
        logger.warning("%s needs at least 3 LFs; recording NaN for grid value %s", model, k)
        return {"model": label, "grid_value": k, "seed": seed, "auc": math.nan, "f1": math.nan,
                "best_epoch": None}
    fitted = _fit_model(model, training_inputs(model, ds, lm), _resolve_weasel(weasel_params, lm.n_lfs),
                        spec.downstream, cell_seed)
    rep = evaluate(fitted.predict_proba(ds.split_features("test")), ds.split_labels("test"),
                   fitted.predict_proba(ds.split_features("val")), ds.split_labels("val"), seed=seed)
    return {"model": label, "grid_value": k, "seed": seed, "auc": rep.auc, "f1": rep.f1,
            "best_epoch": fitted.best_epoch_}


def _execute(tasks, jobs: int):
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks))


# ---------------------------------------------------------------------------
# results

class ResultsTable:
    """Rows of ``(model, grid_value, seed, auc, f1)`` with summaries."""

    COLUMNS = ("model", "grid_value", "seed", "auc", "f1")

    def __init__(self, rows, meta: dict | None = None):
        self.rows = sorted((dict(r) for r in rows), key=lambda r: (r["model"], r["grid_value"], r["seed"]))
        self.meta = meta or {}

    def __len__(self):
        return len(self.rows)

    def models(self) -> list:
        return sorted({r["model"] for r in self.rows})

    def grid_values(self) -> list:
        return sorted({r["grid_value"] for r in self.rows})

    def values(self, model: str, grid_value, metric: str = "auc") -> np.ndarray:
        v = np.array([r[metric] for r in self.rows
                      if r["model"] == model and r["grid_value"] == grid_value and r[metric] is not None],
                     dtype=np.float64)
        return v[~np.isnan(v)]

    def median(self, model: str, grid_value, metric: str = "auc") -> float:
        v = self.values(model, grid_value, metric)
        return float(np.median(v)) if v.size else math.nan

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r["model"], r["grid_value"], r["seed"], repr(float(r["auc"])),
                        "" if r["f1"] is None else repr(float(r["f1"]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ResultsTable":
        with open(path, newline="") as fh:
            rows = [{"model": r["model"], "grid_value": int(r["grid_value"]), "seed": int(r["seed"]),
                     "auc": float(r["auc"]), "f1": float(r["f1"]) if r["f1"] else None}
                    for r in csv.DictReader(fh)]
        return cls(rows)

    def summary(self) -> dict:
        """Per model and grid value: median, quartiles, mean and population std of AUC and F1."""
        out = {}
        for m in self.models():
            out[m] = {}
            for k in self.grid_values():
                cell = {}
                for metric in ("auc", "f1"):
                    v = self.values(m, k, metric)
                    if v.size:
                        cell[metric] = {"median": float(np.median(v)), "p25": float(np.percentile(v, 25)),
                                        "p75": float(np.percentile(v, 75)), "mean": float(v.mean()),
                                        "std": float(v.std()), "n": int(v.size)}
                if cell:
                    out[m][str(k)] = cell
        return {"meta": self.meta, "results": out}

    def plot_data(self, metric: str = "auc") -> dict:
        """``{model: [{"x", "median", "p25", "p75"}, ...]}``, one entry per grid value."""
        out = {}
        for m in self.models():
            series = []
            for k in self.grid_values():
                v = self.values(m, k, metric)
                if v.size:
                    series.append({"x": k, "median": float(np.median(v)),
                                   "p25": float(np.percentile(v, 25)), "p75": float(np.percentile(v, 75))})
            out[m] = series
        return out

    def write(self, directory, stem: str = "results"):
        os.makedirs(directory, exist_ok=True)
        self.to_csv(os.path.join(directory, f"{stem}.csv"))
        with open(os.path.join(directory, f"{stem}_summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        with open(os.path.join(directory, f"{stem}_plot.json"), "w") as fh:
            json.dump(self.plot_data(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# robustness grids

def run_robustness(spec: RobustnessSpec, jobs: int = 1) -> ResultsTable:
    if spec.kind == "adversarial-duplication" and spec.base_lf_specs is not None:
        if not any(s.mode in ("independent", "region", "random") for s in spec.base_lf_specs):
            raise ValueError("the adversarial base set needs at least one voting LF to flip")
    tasks, ceiling = [], []
    for seed in spec.seeds:
        for model in spec.models:
            if model == "supervised-ceiling":
                ceiling.append(seed)
                tasks.append((spec, seed, 0, model, model, {}))
                continue
            for k in spec.duplicate_counts:
                tasks.append((spec, seed, k, model, model, spec.weasel))
    rows = _execute(tasks, jobs)
    out = []
    for r in rows:
        if r["model"] == "supervised-ceiling":
            # trained once per replicate: it never reads the label matrix
            out.extend({**r, "grid_value": k} for k in spec.duplicate_counts)
        else:
            out.append(r)
    return ResultsTable(out, {"experiment": spec.kind, "spec": spec.to_dict()})


def run_adversarial_duplication(spec: RobustnessSpec, jobs: int = 1) -> ResultsTable:
    if spec.kind != "adversarial-duplication":
        spec = replace(spec, kind="adversarial-duplication")
    return run_robustness(spec, jobs)


def run_recovery(spec: RobustnessSpec, jobs: int = 1) -> ResultsTable:
    if spec.kind != "random-duplication":
        spec = replace(spec, kind="random-duplication")
    return run_robustness(spec, jobs)


def run_independent_random(spec: RobustnessSpec, jobs: int = 1) -> ResultsTable:
    if spec.kind != "independent-random":
        spec = replace(spec, kind="independent-random")
    return run_robustness(spec, jobs)


def run_benchmark(spec: RobustnessSpec, jobs: int = 1) -> ResultsTable:
    """Blobs with eight independent LFs; the grid value is unused (recorded as 0)."""
    return run_robustness(replace(spec, kind="benchmark", duplicate_counts=(0,)), jobs)


# ---------------------------------------------------------------------------
# ablations

_LOSS_AXES = {
    "no-stop-grad": "ce_no_stopgrad",
    "asymmetric-ce": "asym_ce",
    "l1-loss": "l1",
    "hellinger-loss": "hellinger",
    "mig-loss": "mig",
}
TAU1_GRID = (0.1, 1.0 / 3.0, 3.0)


def _axis_variants(axis: str, base: dict) -> list:
    if axis == "no-features-to-encoder":
        return [(axis, {"use_features": False})]
    if axis == "linear-encoder":
        return [(axis, {"encoder_hidden": ()})]
    if axis == "deep-encoder":
        return [(axis, {"encoder_hidden": (75, 50, 25, 50, 75)})]
    if axis in ("sigmoid-accuracies", "relu-accuracies", "tanh-accuracies"):
        return [(axis, {"accuracy": axis.split("-")[0]})]
    if axis in _LOSS_AXES:
        return [(axis, {"loss": _LOSS_AXES[axis]})]
    if axis == "loss-variants":
        return [(name, {"loss": loss}) for name, loss in _LOSS_AXES.items()]
    if axis == "tau1":
        t = base.get("tau1", 1.0)
        return [(f"tau1={v:.4g}", {"tau1": v}) for v in TAU1_GRID if not math.isclose(v, t)]
    if axis == "tau2":
        return [("tau2=1", {"tau2": 1.0}), ("tau2=m", {"tau2": "m"})]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


ABLATION_AXES = ("no-features-to-encoder", "linear-encoder", "deep-encoder", "tau1", "tau2",
                 "loss-variants", *_LOSS_AXES, "sigmoid-accuracies", "relu-accuracies", "tanh-accuracies")


@dataclass(frozen=True)
class AblationConfig:
    """The base run that every ablation variant departs from by one change."""

    experiment: RobustnessSpec = field(default_factory=lambda: RobustnessSpec(
        kind="random-duplication", duplicate_counts=(25,), models=("weasel",)))
    weasel: dict = field(default_factory=dict)


def ablation_variants(base: dict, axes) -> list:
    """``[(name, params)]`` starting with the unmodified base."""
    out = [("weasel", dict(base))]
    seen = {"weasel"}
    for axis in axes:
        for name, change in _axis_variants(axis, base):
            if name not in seen:
                seen.add(name)
                out.append((name, {**base, **change}))
    return out


def run_ablation_grid(base_cfg: AblationConfig, axes=(), jobs: int = 1) -> ResultsTable:
    """One-factor-at-a-time WeaSEL variants on ``base_cfg.experiment``."""
    spec = base_cfg.experiment
    variants = ablation_variants({**spec.weasel, **base_cfg.weasel}, axes)
    tasks = [(spec, seed, k, "weasel", name, params)
             for name, params in variants for k in spec.duplicate_counts for seed in spec.seeds]
    rows = _execute(tasks, jobs)
    meta = {"experiment": "ablation", "axes": list(axes), "spec": spec.to_dict(),
            "variants": {name: {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}
                         for name, params in variants}}
    return ResultsTable(rows, meta)


# ---------------------------------------------------------------------------
# presets

def preset(name: str, **overrides) -> RobustnessSpec:
    """Desk-scale versions of the published grids."""
    base = {
        "benchmark": dict(kind="benchmark", duplicate_counts=(0,), models=("weasel", "majority")),
        "recovery": dict(kind="random-duplication", duplicate_counts=(2, 25, 100),
                         models=("weasel", "nb-em", "triplet-mean", "supervised-ceiling")),
        "independent": dict(kind="independent-random", duplicate_counts=(1, 3, 10),
                            models=("weasel", "nb-em", "triplet-mean", "supervised-ceiling")),
        "adversarial": dict(kind="adversarial-duplication", duplicate_counts=(0, 10),
                            models=("weasel", "nb-em"), weasel=dict(ROBUST_WEASEL)),
    }
    if name not in base:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(base)}")
    return RobustnessSpec(**{**base[name], **overrides})


PRESETS = ("benchmark", "recovery", "independent", "adversarial")
