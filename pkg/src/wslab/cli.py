"""``wslab`` command-line entry point.

Each subcommand reads one JSON config (``--config``), applies flag
overrides, rejects unknown keys and writes its outputs together with the
resolved ``config.json`` that reproduces the run.  Exit codes: 0 success,
1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from .data import (
    Dataset,
    LabelMatrix,
    SyntheticLFSpec,
    format_coverage,
    generate_blobs,
    generate_lfs,
    load_features,
    load_label_matrix,
    load_labels,
    load_probabilistic_matrix,
    save_features,
    save_label_matrix,
    save_labels,
)
from .experiments import (
    ABLATION_AXES,
    PRESETS,
    AblationConfig,
    RobustnessSpec,
    preset,
    run_ablation_grid,
    run_robustness,
    standard_lf_specs,
)
from .losses import get_loss
from .labelmodels import MajorityVote, NaiveBayesEM, TripletLabelModel
from .metrics import evaluate
from .weasel import SoftLabelClassifier, TrainingError, WeaselClassifier

logger = logging.getLogger("wslab")

ENV_OUTPUT_ROOT = "WSLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
BASELINES = ("majority", "nb-em", "triplet-mean", "triplet-median")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# config schemas: key -> default

_TRAIN_KEYS = {
    "lr": 1e-4, "lr_grid": None, "weight_decay": 7e-7, "dropout": 0.3, "batch_size": 64,
    "max_epochs": 150, "early_stopping": "auc", "patience": None,
}

SCHEMAS = {
    "synth": {
        "out": None, "seed": 0, "n": 1000, "d": 10, "num_classes": 2, "separation": 6.0,
        "balance": None, "split": [0.7, 0.1, 0.2], "lfs": None,
    },
    "train": {
        "out": None, "seed": 0, "data": None, "preset": None, "tau1": 1.0, "tau2": None,
        "accuracy": "softmax", "class_conditional": False, "use_features": True, "loss": "sym_ce",
        "encoder_hidden": [70, 70], "downstream_hidden": [50, 50, 25], "encoder_batchnorm": True,
        "downstream_batchnorm": False, "prior": None, **_TRAIN_KEYS,
    },
    "baseline": {
        "out": None, "seed": 0, "data": None, "model": "majority", "train_downstream": False,
        "hard_labels": None, "downstream_hidden": [50, 50, 25], **_TRAIN_KEYS,
    },
    "robustness": {
        "out": None, "seed": 0, "preset": None, "jobs": 1, "experiment": {},
    },
    "ablate": {
        "out": None, "seed": 0, "preset": "recovery", "jobs": 1, "experiment": {}, "axes": [],
        "weasel": {},
    },
    "eval": {
        "out": None, "seed": None, "predictions": None, "labels": None, "val_predictions": None,
        "val_labels": None,
    },
}

_TRAIN_PRESETS = {"robust": {"tau1": 1.0 / 3.0}}


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")
    return cfg


def resolve_config(command: str, file_cfg: dict, overrides: dict) -> dict:
    """Defaults, then the config file, then flags; unknown keys are an error."""
    schema = SCHEMAS[command]
    cfg = dict(file_cfg)
    cfg.pop("command", None)
    unknown = sorted(set(cfg) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command!r}: {', '.join(unknown)}")
    merged = {**schema, **cfg}
    for key, value in overrides.items():
        if key not in schema:
            raise ConfigError(f"unknown config key for {command!r}: {key}")
        if value is not None:
            merged[key] = value
    if merged["out"] is None:
        merged["out"] = os.path.join(os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT), command)
    return merged


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# ---------------------------------------------------------------------------
# file helpers

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _finish(out, command, cfg, files):
    """Write the resolved config and a manifest with content hashes."""
    _write_json(os.path.join(out, "config.json"), {"command": command, **cfg})
    _write_json(os.path.join(out, "manifest.json"), {
        "command": command, "version": __version__, "config": cfg,
        "files": {name: _sha256(os.path.join(out, name)) for name in sorted(files)},
    })


def _make_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None


def load_dataset_dir(path) -> tuple[Dataset, LabelMatrix]:
    """Read a directory written by ``wslab synth`` (or laid out the same way)."""
    if path is None:
        raise ConfigError("a 'data' directory is required")
    need = ["features.csv", "splits.json"]
    missing = [n for n in need if not os.path.exists(os.path.join(path, n))]
    if missing:
        raise ConfigError(f"{path}: missing {', '.join(missing)}")
    with open(os.path.join(path, "splits.json")) as fh:
        splits = json.load(fh)
    X = load_features(os.path.join(path, "features.csv"))
    labels_path = os.path.join(path, "labels.csv")
    y = load_labels(labels_path) if os.path.exists(labels_path) else None
    ds = Dataset(X, y, splits["class_balance"], splits["train"], splits.get("val", []), splits.get("test", []))
    prob_path = os.path.join(path, "label_matrix.json")
    csv_path = os.path.join(path, "label_matrix.csv")
    if os.path.exists(prob_path):
        lm = load_probabilistic_matrix(prob_path)
    elif os.path.exists(csv_path):
        lm = load_label_matrix(csv_path, ds.num_classes)
    else:
        raise ConfigError(f"{path}: no label_matrix.csv or label_matrix.json")
    if lm.n_samples != ds.n_samples:
        raise ConfigError(f"label matrix has {lm.n_samples} rows but features have {ds.n_samples}")
    return ds, lm


def _need_labels(ds, *splits):
    if ds.labels is None:
        raise ConfigError("this command needs ground-truth labels for evaluation")
    for s in splits:
        if getattr(ds, s).size == 0:
            raise ConfigError(f"the {s} split is empty")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: dict) -> dict:
    try:
        specs = cfg["lfs"]
        if specs is None:
            specs = standard_lf_specs(np.random.default_rng([cfg["seed"], 1]))
            cfg["lfs"] = [s.to_dict() for s in specs]
        else:
            specs = [SyntheticLFSpec(**s) for s in specs]
        ds = generate_blobs(cfg["n"], cfg["d"], cfg["num_classes"], cfg["separation"],
                            balance=cfg["balance"], seed=cfg["seed"], split=cfg["split"])
        lm = generate_lfs(ds, specs, seed=cfg["seed"] + 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid generator spec: {exc}") from None
    out = cfg["out"]
    _make_out(out)
    save_features(ds.features, os.path.join(out, "features.csv"))
    save_labels(ds.labels, os.path.join(out, "labels.csv"))
    save_label_matrix(lm, os.path.join(out, "label_matrix.csv"))
    _write_json(os.path.join(out, "splits.json"), {
        "class_balance": ds.class_balance, "train": ds.train, "val": ds.val, "test": ds.test})
    files = ["features.csv", "labels.csv", "label_matrix.csv", "splits.json"]
    _finish(out, "synth", cfg, files)
    print(f"wrote {ds.n_samples} rows x {lm.n_lfs} LFs to {out} (coverage {format_coverage(lm)}%)")
    return {"out": out}


def _split_eval(model, ds):
    return evaluate(model.predict_proba(ds.split_features("test")), ds.split_labels("test"),
                    model.predict_proba(ds.split_features("val")), ds.split_labels("val"))


def cmd_train(cfg: dict) -> dict:
    ds, lm = load_dataset_dir(cfg["data"])
    _need_labels(ds, "val", "test")
    params = dict(cfg)
    if cfg["preset"] is not None:
        if cfg["preset"] not in _TRAIN_PRESETS:
            raise ConfigError(f"unknown train preset {cfg['preset']!r}; expected one of {sorted(_TRAIN_PRESETS)}")
        params.update(_TRAIN_PRESETS[cfg["preset"]])
    est_keys = ["tau1", "tau2", "accuracy", "class_conditional", "use_features", "loss", "weight_decay",
                "dropout", "batch_size", "max_epochs", "early_stopping", "patience", "encoder_batchnorm",
                "downstream_batchnorm", "prior"]
    kw = {k: params[k] for k in est_keys}
    kw["encoder_hidden"] = tuple(params["encoder_hidden"])
    kw["downstream_hidden"] = tuple(params["downstream_hidden"])
    grid = params["lr_grid"] or [params["lr"]]
    try:
        base = WeaselClassifier(**kw, random_state=cfg["seed"], n_classes=lm.num_classes)
        base._check_train_params()
        get_loss(kw["loss"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    X = ds.split_features("train")
    L = lm.take(ds.train)
    eval_set = (ds.split_features("val"), ds.split_labels("val"))
    best, lr_results = None, []
    for lr in grid:
        model = WeaselClassifier(**kw, lr=float(lr), random_state=cfg["seed"], n_classes=lm.num_classes)
        model.fit(X, L, eval_set=eval_set if kw["early_stopping"] else None)
        score = model.best_val_metric_
        lr_results.append({"lr": float(lr), "best_val_metric": score, "best_epoch": model.best_epoch_})
        if best is None or (score is not None and (best[1] is None or score > best[1])):
            best = (model, score, float(lr))
    model, _, lr = best
    out = os.path.join(cfg["out"], "weasel")
    _make_out(out)
    report = _split_eval(model, ds).to_dict()
    report.update({"model": "weasel", "loss": kw["loss"], "lr": lr, "lr_grid": lr_results,
                   "tau1": kw["tau1"], "tau2": model.tau2_, "best_epoch": model.best_epoch_,
                   "seed": cfg["seed"]})
    _write_json(os.path.join(out, "metrics.json"), report)
    with open(os.path.join(out, "history.jsonl"), "w") as fh:
        fh.write(model.history_jsonl())
    model.save(os.path.join(out, "checkpoint.json"))
    _finish(out, "train", cfg, ["metrics.json", "history.jsonl", "checkpoint.json"])
    print(f"weasel: test AUC {report['auc']:.4f}, F1 {report['f1'] if report['f1'] is None else round(report['f1'], 4)}"
          f" (lr {lr}, epoch {model.best_epoch_})")
    return report


def cmd_baseline(cfg: dict) -> dict:
    ds, lm = load_dataset_dir(cfg["data"])
    name = cfg["model"]
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {name!r}; expected one of {BASELINES}")
    if name.startswith("triplet"):
        if lm.num_classes != 2:
            raise ConfigError(f"{name} only supports binary tasks (C=2); this matrix has C={lm.num_classes}")
        if lm.n_lfs < 3:
            raise ConfigError(f"{name} needs at least 3 LFs; this matrix has {lm.n_lfs}")
    prior = ds.class_balance
    L_train = lm.take(ds.train)
    if name == "majority":
        est = MajorityVote(prior=prior, random_state=cfg["seed"]).fit(L_train)
    elif name == "nb-em":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = NaiveBayesEM(prior=prior).fit(L_train)
    else:
        est = TripletLabelModel(aggregation=name.split("-", 1)[1], prior=prior,
                                random_state=cfg["seed"]).fit(L_train)
    soft = est.predict_proba(lm)
    out = os.path.join(cfg["out"], name)
    _make_out(out)
    np.savetxt(os.path.join(out, "soft_labels.csv"), soft, delimiter=",", fmt="%.17g")
    files = ["soft_labels.csv", "metrics.json"]
    report = {"model": name, "seed": cfg["seed"]}
    if ds.labels is not None and ds.test.size:
        lm_rep = evaluate(soft[ds.test], ds.split_labels("test"),
                          soft[ds.val] if ds.val.size else None,
                          ds.split_labels("val") if ds.val.size else None)
        report["label_model"] = lm_rep.to_dict()
    if cfg["train_downstream"]:
        _need_labels(ds, "val", "test")
        hard = cfg["hard_labels"] if cfg["hard_labels"] is not None else name == "majority"
        targets = est.predict(L_train) if hard else soft[ds.train]
        covered = L_train.covered_mask()
        if not covered.any():
            raise ConfigError("empty training set: no training row has a vote")
        down = SoftLabelClassifier(downstream_hidden=tuple(cfg["downstream_hidden"]), lr=cfg["lr"],
                                   weight_decay=cfg["weight_decay"], dropout=cfg["dropout"],
                                   batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
                                   early_stopping=cfg["early_stopping"], patience=cfg["patience"],
                                   n_classes=lm.num_classes, random_state=cfg["seed"])
        down.fit(ds.split_features("train")[covered], np.asarray(targets)[covered],
                 eval_set=(ds.split_features("val"), ds.split_labels("val")))
        report["downstream"] = _split_eval(down, ds).to_dict()
        report["downstream"]["hard_labels"] = bool(hard)
        report["downstream"]["best_epoch"] = down.best_epoch_
    _write_json(os.path.join(out, "metrics.json"), report)
    _finish(out, "baseline", cfg, files)
    head = report.get("downstream", report.get("label_model"))
    if head:
        print(f"{name}: test AUC {head['auc']:.4f}")
    return report


def _experiment_spec(cfg: dict, kind_default: str | None) -> RobustnessSpec:
    exp = dict(cfg["experiment"])
    exp.setdefault("master_seed", cfg["seed"])
    try:
        if cfg["preset"] is not None:
            return preset(cfg["preset"], **exp)
        if kind_default is not None:
            exp.setdefault("kind", kind_default)
        return RobustnessSpec(**exp)
    except TypeError as exc:
        raise ConfigError(f"invalid experiment block: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_robustness(cfg: dict) -> dict:
    if cfg["preset"] is None and "kind" not in cfg["experiment"]:
        raise ConfigError(f"robustness needs a preset ({', '.join(PRESETS)}) or experiment.kind")
    spec = _experiment_spec(cfg, None)
    out = cfg["out"]
    _make_out(out)
    table = run_robustness(spec, jobs=cfg["jobs"])
    table.write(out)
    _finish(out, "robustness", cfg, ["results.csv", "results_summary.json", "results_plot.json"])
    _print_medians(table)
    return table.summary()


def cmd_ablate(cfg: dict) -> dict:
    unknown = [a for a in cfg["axes"] if a not in ABLATION_AXES]
    if unknown:
        raise ConfigError(f"unknown ablation axes {unknown}; expected a subset of {list(ABLATION_AXES)}")
    exp_cfg = dict(cfg)
    exp_cfg["experiment"] = {"models": ["weasel"], **cfg["experiment"]}
    spec = _experiment_spec(exp_cfg, "random-duplication")
    out = cfg["out"]
    _make_out(out)
    table = run_ablation_grid(AblationConfig(experiment=spec, weasel=dict(cfg["weasel"])), cfg["axes"],
                              jobs=cfg["jobs"])
    table.write(out)
    _finish(out, "ablate", cfg, ["results.csv", "results_summary.json", "results_plot.json"])
    _print_medians(table)
    return table.summary()


def cmd_eval(cfg: dict) -> dict:
    if cfg["predictions"] is None or cfg["labels"] is None:
        raise ConfigError("eval needs 'predictions' (N x C probabilities CSV) and 'labels'")
    for key in ("predictions", "labels", "val_predictions", "val_labels"):
        if cfg[key] is not None and not os.path.exists(cfg[key]):
            raise ConfigError(f"{key} file not found: {cfg[key]}")
    probs = np.loadtxt(cfg["predictions"], delimiter=",", ndmin=2)
    y = load_labels(cfg["labels"])
    if probs.shape[0] != y.size:
        raise ConfigError(f"{probs.shape[0]} predictions for {y.size} labels")
    vp = np.loadtxt(cfg["val_predictions"], delimiter=",", ndmin=2) if cfg["val_predictions"] else None
    vy = load_labels(cfg["val_labels"]) if cfg["val_labels"] else None
    if (vp is None) != (vy is None):
        raise ConfigError("val_predictions and val_labels must be given together")
    report = evaluate(probs, y, vp, vy, seed=cfg["seed"]).to_dict()
    out = cfg["out"]
    _make_out(out)
    _write_json(os.path.join(out, "metrics.json"), report)
    _finish(out, "eval", cfg, ["metrics.json"])
    print(f"AUC {report['auc']:.4f}")
    return report


def _print_medians(table):
    for m in table.models():
        cells = ", ".join(f"{k}: {table.median(m, k):.4f}" for k in table.grid_values())
        print(f"{m:>24}  {cells}")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "baseline": cmd_baseline,
    "robustness": cmd_robustness, "ablate": cmd_ablate, "eval": cmd_eval,
}


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wslab", description="Weak-supervision lab: WeaSEL, baselines, experiments.")
    p.add_argument("--version", action="version", version=f"wslab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT_ROOT}/<command>)")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (VALUE parsed as JSON when possible)")
        return sp

    s = common(sub.add_parser("synth", help="generate blobs and a synthetic label matrix"))
    s.add_argument("--n", type=int)
    s.add_argument("--d", type=int)

    t = common(sub.add_parser("train", help="train WeaSEL on a dataset directory"))
    t.add_argument("--data")
    t.add_argument("--loss")
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-grid", type=float, nargs="+", dest="lr_grid")
    t.add_argument("--tau1", type=float)
    t.add_argument("--max-epochs", type=int, dest="max_epochs")
    t.add_argument("--preset", choices=sorted(_TRAIN_PRESETS))

    b = common(sub.add_parser("baseline", help="run a label-model baseline"))
    b.add_argument("--data")
    b.add_argument("--model", choices=BASELINES)
    b.add_argument("--train-downstream", action="store_const", const=True, dest="train_downstream")
    b.add_argument("--max-epochs", type=int, dest="max_epochs")

    r = common(sub.add_parser("robustness", help="run a robustness grid"))
    r.add_argument("--preset", choices=PRESETS)
    r.add_argument("--jobs", type=int)

    a = common(sub.add_parser("ablate", help="run one-factor-at-a-time WeaSEL ablations"))
    a.add_argument("--preset", choices=PRESETS)
    a.add_argument("--axes", nargs="+", help=f"any of: {', '.join(ABLATION_AXES)}")
    a.add_argument("--jobs", type=int)

    e = common(sub.add_parser("eval", help="score saved predictions"))
    e.add_argument("--predictions")
    e.add_argument("--labels")
    e.add_argument("--val-predictions", dest="val_predictions")
    e.add_argument("--val-labels", dest="val_labels")
    return p


_NOT_CONFIG = {"command", "config", "set", "verbose"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
        overrides.update(_parse_set(args.set))
        cfg = resolve_config(args.command, _load_config(args.config), overrides)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"wslab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError, ValueError, OSError) as exc:
        print(f"wslab {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
