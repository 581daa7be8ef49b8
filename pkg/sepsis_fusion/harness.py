"""Experiment harness: variant training, ablations, sample-size sweeps and the calibration study."""
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Callable
import threading
import logging
import json
import time

import numpy as np
import pandas as pd
from tqdm import tqdm

from sepsis_fusion.cohort import TASK_CLASSES, load_cohort, split_cohort, task_classes
from sepsis_fusion.config import Config
from sepsis_fusion.errors import ConfigError, MetricError, ModelError, OutputError, SepsisFusionError
from sepsis_fusion.experts import (
    PARAM_TYPES, ExpertKind, class_prior, fit_expert, modality_present, predict_records, save_expert,
)
from sepsis_fusion.fusionformer import (
    FusionFormerParams, fusionformer_predict, save_fusionformer, train_fusionformer,
)
from sepsis_fusion.gbdt import GBDTParams
from sepsis_fusion.guards import GuardSettings, apply_guards
from sepsis_fusion.latefusion import (
    QUADMODAL, TRIMODAL, degradation_report, ensemble_predict_many, expert_reliability_by_context,
    fit_gate, gate_block_importance, late_concat_baseline, late_concat_predict_many, oof_stack,
    save_ensemble, EnsembleModel,
)
from sepsis_fusion.metrics import (
    DEFAULT_THRESHOLD, auprc, binary_counts, calibrate_threshold, confusion_matrix, macro_auprc,
    macro_ovr_auc, precision_recall_points, report_from_confusion, roc_auc, roc_points,
    sensitivity_specificity,
)
from sepsis_fusion.reporting import Report
from sepsis_fusion.synthgen import GenSpec, generate_cohort, load_genspec, oracle_scores
from sepsis_fusion.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    CHANCE = "CHANCE"
    STATIC_ONLY = "STATIC_ONLY"
    TEMPORAL_ONLY = "TEMPORAL_ONLY"
    NLP_ONLY = "NLP_ONLY"
    LATE_CONCAT = "LATE_CONCAT"
    MOE_TRIMODAL = "MOE_TRIMODAL"
    MOE_QUADMODAL = "MOE_QUADMODAL"
    FUSIONFORMER = "FUSIONFORMER"
    ORACLE = "ORACLE"


TABLE_ROWS = {
    Variant.CHANCE: "Chance Baseline",
    Variant.STATIC_ONLY: "Static-Only",
    Variant.TEMPORAL_ONLY: "Temporal-Only",
    Variant.NLP_ONLY: "NLP-Only",
    Variant.LATE_CONCAT: "Late Concat",
    Variant.MOE_TRIMODAL: "MoE (Trimodal, No Vision)",
    Variant.MOE_QUADMODAL: "MoE (Quad-Modal, With Vision)",
    Variant.FUSIONFORMER: "Deep Fusion",
    Variant.ORACLE: "Bayes Oracle",
}

UNIMODAL = {
    Variant.STATIC_ONLY: ExpertKind.HISTORIAN,
    Variant.TEMPORAL_ONLY: ExpertKind.MONITOR,
    Variant.NLP_ONLY: ExpertKind.READER,
}

MOE_EXPERTS = {Variant.MOE_TRIMODAL: TRIMODAL, Variant.MOE_QUADMODAL: QUADMODAL}

DEFAULT_SIZES = {"detection": 8000, "mortality": 1200, "antibiotic": 2100}

MODEL_SECTIONS = {kind.value: PARAM_TYPES[kind] for kind in ExpertKind}
MODEL_SECTIONS.update({"gate": GBDTParams, "fusionformer": FusionFormerParams})

GUARD_KEYS = {f.name for f in fields(GuardSettings)}

METRIC_COLUMNS = ("train_auc", "val_auc", "test_auc", "test_macro_auc", "test_auprc", "overfit_gap")
CELL_COLUMNS = ("variant", "table_row", "seed", "task", "status", "error") + METRIC_COLUMNS

REFERENCE_NOTE = "reference figure: missed cases fell from 1,025 to 536 (48% fewer) at the calibrated threshold"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    task: str
    genspec: str | None = None
    cohort: str | None = None
    n: int | None = None
    genspec_overrides: dict = field(default_factory=dict)
    variants: tuple = (Variant.STATIC_ONLY, Variant.TEMPORAL_ONLY, Variant.NLP_ONLY, Variant.LATE_CONCAT,
                       Variant.MOE_TRIMODAL, Variant.MOE_QUADMODAL, Variant.FUSIONFORMER)
    fractions: tuple = (0.7, 0.15, 0.15)
    seeds: tuple = (0,)
    guard: dict = field(default_factory=dict)
    folds: int = 5
    models: dict = field(default_factory=dict)
    output_dir: str | None = None
    target_sensitivity: float = 0.85
    sizes: tuple = ()
    formats: tuple = ("json", "csv", "svg")

    def __post_init__(self):
        try:
            variants = tuple(Variant(v) for v in self.variants)
        except ValueError as exc:
            raise ConfigError(f"unknown variant: {exc}") from None
        object.__setattr__(self, "variants", variants)
        for name in ("fractions", "seeds", "sizes", "formats"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if not self.name or "/" in self.name:
            raise ConfigError(f"experiment name must be a non-empty file stem, got {self.name!r}")
        if self.task not in TASK_CLASSES:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {sorted(TASK_CLASSES)}")
        if not self.variants:
            raise ConfigError("at least one variant is required")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("variants must not repeat")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if (self.genspec is None) == (self.cohort is None):
            raise ConfigError("exactly one of genspec and cohort must be given")
        if self.cohort is not None and (self.genspec_overrides or self.sizes):
            raise ConfigError("genspec_overrides and sizes need a genspec source")
        if Variant.ORACLE in self.variants and self.genspec is None:
            raise ConfigError("the ORACLE variant needs a genspec source")
        if self.n is not None and self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 <= self.target_sensitivity <= 1.0:
            raise ConfigError(f"target_sensitivity must lie in [0, 1], got {self.target_sensitivity}")
        if list(self.sizes) != sorted(set(self.sizes)) or any(s < 1 for s in self.sizes):
            raise ConfigError(f"sizes must be positive and strictly ascending, got {list(self.sizes)}")
        unknown = sorted(set(self.guard) - GUARD_KEYS)
        if unknown:
            raise ConfigError(f"unknown guard settings {unknown}")
        unknown = sorted(set(self.models) - set(MODEL_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown model sections {unknown}; expected {sorted(MODEL_SECTIONS)}")
        for section in MODEL_SECTIONS:
            self.model_params(section)
        self.guard_settings(0)

    @property
    def cohort_size(self):
        return self.n if self.n is not None else DEFAULT_SIZES[self.task]

    def model_params(self, section):
        try:
            return MODEL_SECTIONS[section].from_dict(dict(self.models.get(section, {})))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"models.{section}: {exc}") from None

    def guard_settings(self, seed):
        try:
            return GuardSettings(**{"seed": seed, **self.guard})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"guard: {exc}") from None

    def load_genspec(self):
        spec = load_genspec(self.genspec)
        if self.genspec_overrides:
            try:
                spec = spec.with_overrides(**self.genspec_overrides)
            except ValueError as exc:
                raise ConfigError(f"genspec_overrides: {exc}") from None
        return spec

    def to_dict(self):
        payload = asdict(self)
        payload["variants"] = [v.value for v in self.variants]
        for name in ("fractions", "seeds", "sizes", "formats"):
            payload[name] = list(payload[name])
        return payload


def experiment_config_from_dict(payload):
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    try:
        return ExperimentConfig(**payload)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_experiment_config(source):
    """ExperimentConfig from a JSON file or the name of a shipped experiment preset."""
    path = Path(source)
    if not path.exists():
        path = Config.PRESETS_DIR / "experiments" / f"{str(source).removesuffix('.json')}.json"
        if not path.exists():
            raise ConfigError(f"no experiment config file or preset named {source!r}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return experiment_config_from_dict(payload)


# Seed preparation

class _StackCache:
    """Out-of-fold stacks shared by the variants of one seed; built once even under threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries = {}

    def get(self, key, build):
        with self._lock:
            future = self._entries.get(key)
            owner = future is None
            if owner:
                future = self._entries[key] = Future()
        if owner:
            try:
                future.set_result(build())
            except BaseException as exc:
                future.set_exception(exc)
        return future.result()


@dataclass
class SeedData:
    seed: int
    train: object
    val: object
    test: object
    spec: GenSpec | None
    audit: object
    stacks: _StackCache = field(default_factory=_StackCache, repr=False)


def prepare_seed(config, seed, n=None):
    """Generate or load the cohort, guard it and split it; every variant of the seed shares the result."""
    spec = None
    if config.genspec is not None:
        spec = config.load_genspec()
        cohort = generate_cohort(spec, n or config.cohort_size, derive_seed("cohort", seed))
    else:
        cohort = load_cohort(config.cohort)
    cohort = cohort.task_records(config.task)
    guarded, audit = apply_guards(cohort, config.task, config.guard_settings(seed))
    train, val, test = split_cohort(guarded, config.fractions, config.task, derive_seed("split", seed))
    logger.info("seed %d: %d train, %d val, %d test records", seed, len(train), len(val), len(test))
    return SeedData(seed, train, val, test, spec, audit)


# Variant fitting

@dataclass
class FittedVariant:
    variant: Variant
    model: object
    predict: Callable
    train_probs: np.ndarray
    extras: dict = field(default_factory=dict)


def _seeded(params, *parts):
    return replace(params, seed=derive_seed(params.seed, *parts))


def expert_configs(config, seed):
    return {kind: _seeded(config.model_params(kind.value), seed) for kind in ExpertKind}


def _expert_probs(model, records):
    """Expert probabilities with the expert's class prior for records lacking its modality."""
    probs = np.tile(model.prior, (len(records), 1))
    present = [i for i, r in enumerate(records) if modality_present(model.kind, r)]
    if present:
        probs[present] = predict_records(model, [records[i] for i in present])
    return probs


def _fit_unimodal(kind, data, config, configs):
    records = list(data.train)
    y = data.train.labels(config.task)
    present = [i for i, r in enumerate(records) if modality_present(kind, r)]
    if not present:
        raise ModelError(f"no training record carries the {kind.value} modality")
    model = fit_expert(kind, [records[i] for i in present], y[present], configs[kind],
                       len(task_classes(config.task)), data.train.schema)
    return model, lambda rs: _expert_probs(model, list(rs))


def _stack(data, config, configs, experts):
    return data.stacks.get(experts, lambda: oof_stack(
        data.train, configs, config.task, config.folds, derive_seed("stack", data.seed), experts=experts,
    ))


# Fit variant logic
def fit_variant(variant, data, config):
    variant = Variant(variant)
    task = config.task
    n_classes = len(task_classes(task))
    y_train = data.train.labels(task)
    configs = expert_configs(config, data.seed)

    if variant is Variant.CHANCE:
        prior = class_prior(y_train, n_classes)
        predict = lambda rs: np.tile(prior, (len(list(rs)), 1))  # noqa: E731
        return FittedVariant(variant, prior, predict, predict(data.train))

    if variant is Variant.ORACLE:
        spec = data.spec
        return FittedVariant(variant, spec, lambda rs: oracle_scores(list(rs), spec, task),
                             np.full((len(data.train), n_classes), np.nan))

    if variant in UNIMODAL:
        model, predict = _fit_unimodal(UNIMODAL[variant], data, config, configs)
        return FittedVariant(variant, model, predict, predict(data.train))

    if variant is Variant.LATE_CONCAT:
        meta = _stack(data, config, configs, TRIMODAL)
        model = late_concat_baseline(data.train, configs, task, config.folds, meta=meta)
        train_probs = np.zeros((len(meta.y), n_classes))
        train_probs[:, model.classifier.classes_] = model.classifier.predict_proba(meta.X[:, model.block_columns()])
        return FittedVariant(variant, model, lambda rs: late_concat_predict_many(model, rs), train_probs)

    if variant in MOE_EXPERTS:
        meta = _stack(data, config, configs, MOE_EXPERTS[variant])
        gate = fit_gate(meta, _seeded(config.model_params("gate"), data.seed))
        model = EnsembleModel(
            meta.experts, gate, meta.layout, config.folds, class_prior(meta.y, n_classes), task,
            {"cohort": data.train.provenance, "seed": data.seed, "n_train": len(data.train)},
        )
        test = list(data.test)
        extras = {
            "gate_importance": gate_block_importance(model),
            "reliability": expert_reliability_by_context(model, test),
            "degradation": degradation_report(model, test, data.test.labels(task)),
        }
        # gate outputs on the out-of-fold rows it was fitted on
        return FittedVariant(variant, model, lambda rs: ensemble_predict_many(model, rs),
                             gate.predict_proba(meta.X), extras)

    params = _seeded(config.model_params("fusionformer"), data.seed)
    model, curves = train_fusionformer(data.train, params, task, splits=(data.train, data.val))
    predict = lambda rs: fusionformer_predict(model, list(rs))  # noqa: E731
    return FittedVariant(variant, model, predict, predict(data.train), {"curves": curves})


def save_fitted(fitted, directory):
    """Model bundle for a fitted variant."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        variant = fitted.variant
        if variant in UNIMODAL:
            save_expert(fitted.model, directory / f"{fitted.model.kind.value}.json")
        elif variant in MOE_EXPERTS:
            save_ensemble(fitted.model, directory)
        elif variant is Variant.FUSIONFORMER:
            save_fusionformer(fitted.model, directory / "fusionformer.json")
            fitted.extras["curves"].write_csv(directory / "training_curves.csv")
        elif variant is Variant.LATE_CONCAT:
            (directory / "experts").mkdir(exist_ok=True)
            for kind, expert in fitted.model.experts.items():
                save_expert(expert, directory / "experts" / f"{kind.value}.json")
            classifier = fitted.model.classifier
            manifest = {"layout": fitted.model.layout.to_dict(), "classes": classifier.classes_.tolist(),
                        "coef": classifier.coef_.tolist(), "intercept": classifier.intercept_.tolist()}
            (directory / "late_concat.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        elif variant is Variant.CHANCE:
            (directory / "prior.json").write_text(json.dumps({"prior": fitted.model.tolist()}), encoding="utf-8")
        else:
            (directory / "genspec.json").write_text(json.dumps(fitted.model.to_dict(), indent=2), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write model bundle {directory}: {exc}") from exc
    return directory


# Cell evaluation

def _headline_auc(probs, y):
    try:
        if probs.shape[1] == 2:
            return roc_auc(probs[:, 1], y)
        return macro_ovr_auc(probs, y)
    except MetricError:
        return float("nan")


def _headline_auprc(probs, y):
    try:
        if probs.shape[1] == 2:
            return auprc(probs[:, 1], y)
        return macro_auprc(probs, y)
    except MetricError:
        return float("nan")


def _macro_auc(probs, y):
    try:
        return macro_ovr_auc(probs, y)
    except MetricError:
        return float("nan")


def evaluate_variant(fitted, data, task):
    y_train, y_val, y_test = (part.labels(task) for part in (data.train, data.val, data.test))
    train_auc = _headline_auc(fitted.train_probs, y_train) if not np.isnan(fitted.train_probs).any() \
        else float("nan")
    val_auc = _headline_auc(fitted.predict(data.val), y_val)
    test_probs = fitted.predict(data.test)
    return {
        "train_auc": train_auc,
        "val_auc": val_auc,
        "test_auc": _headline_auc(test_probs, y_test),
        "test_macro_auc": _macro_auc(test_probs, y_test),
        "test_auprc": _headline_auprc(test_probs, y_test),
        "overfit_gap": train_auc - val_auc,
    }


def _blank_row(config, variant, seed, status, error=None):
    row = {"variant": variant.value, "table_row": TABLE_ROWS[variant], "seed": seed, "task": config.task,
           "status": status, "error": error}
    row.update({column: float("nan") for column in METRIC_COLUMNS})
    return row


def run_cell(config, variant, data):
    """One (variant, seed) cell; failures are captured in the row so other cells still run."""
    started = time.perf_counter()
    try:
        fitted = fit_variant(variant, data, config)
        row = _blank_row(config, variant, data.seed, "ok")
        row.update(evaluate_variant(fitted, data, config.task))
    except (SepsisFusionError, ValueError, ArithmeticError) as exc:
        logger.error("%s seed %d failed: %s", variant.value, data.seed, exc)
        fitted = None
        row = _blank_row(config, variant, data.seed, "error", f"{type(exc).__name__}: {exc}")
    row["wall_time"] = time.perf_counter() - started
    logger.info("%s seed %d: %s in %.1fs", variant.value, data.seed, row["status"], row["wall_time"])
    return row, fitted


def run_cells(config, threads=1, n=None):
    """Every variant x seed cell, merged in (seed, variant) order whatever the thread count."""
    cells = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {}
        for seed in config.seeds:
            try:
                data = prepare_seed(config, seed, n)
            except SepsisFusionError as exc:
                logger.error("seed %d failed during preparation: %s", seed, exc)
                for variant in config.variants:
                    row = _blank_row(config, variant, seed, "error", f"{type(exc).__name__}: {exc}")
                    cells[(seed, variant)] = (dict(row, wall_time=0.0), None)
                continue
            for variant in config.variants:
                futures[(seed, variant)] = pool.submit(run_cell, config, variant, data)
        order = [(seed, variant) for seed in config.seeds for variant in config.variants]
        for key in tqdm(order, desc=config.name, unit="cell", leave=False):
            if key in futures:
                cells[key] = futures[key].result()
    return [cells[key] for key in order]


# Reports

def _metric_frame(rows, extra_columns=()):
    columns = list(extra_columns) + list(CELL_COLUMNS)
    return pd.DataFrame([{c: row[c] for c in columns} for row in rows], columns=columns)


def summarize(frame, keys):
    """Mean and population standard deviation of every metric over the ok seeds of each group."""
    rows = []
    for group, part in frame.groupby(keys, sort=False):
        group = group if isinstance(group, tuple) else (group,)
        ok = part[part["status"] == "ok"]
        row = dict(zip(keys, group))
        row["table_row"] = part["table_row"].iloc[0]
        row["n_ok"] = len(ok)
        for column in METRIC_COLUMNS:
            values = ok[column].to_numpy(dtype=np.float64)
            values = values[np.isfinite(values)]
            row[f"{column}_mean"] = float(values.mean()) if len(values) else float("nan")
            row[f"{column}_std"] = float(values.std(ddof=0)) if len(values) else float("nan")
        rows.append(row)
    return pd.DataFrame(rows)


def _extras_tables(results):
    importance, reliability, degradation, curves = [], [], [], []
    for row, fitted in results:
        if fitted is None:
            continue
        tag = {"variant": row["variant"], "seed": row["seed"]}
        if "gate_importance" in fitted.extras:
            importance.extend(dict(tag, block=block, share=share)
                              for block, share in fitted.extras["gate_importance"].items())
            reliability.append(fitted.extras["reliability"].assign(**tag))
            degradation.append(fitted.extras["degradation"].assign(**tag))
        if "curves" in fitted.extras:
            curves.append(fitted.extras["curves"].to_frame().assign(seed=row["seed"]))
    tables = {}
    if importance:
        tables["gate_importance"] = pd.DataFrame(importance)
        tables["reliability"] = _leading(pd.concat(reliability, ignore_index=True), ("variant", "seed"))
        tables["degradation"] = _leading(pd.concat(degradation, ignore_index=True), ("variant", "seed"))
    if curves:
        tables["training_curves"] = _leading(pd.concat(curves, ignore_index=True), ("seed",))
    return tables


def _leading(frame, columns):
    return frame[list(columns) + [c for c in frame.columns if c not in columns]]


def _store_rows(results, **extra):
    return tuple(dict(row, **extra) for row, _ in results)


# Ablation logic
def run_ablation(config, threads=1):
    """Train and evaluate every variant on every seed's shared guarded split."""
    started = time.perf_counter()
    results = run_cells(config, threads)
    cells = _metric_frame([row for row, _ in results])
    tables = {"cells": cells, "summary": summarize(cells, ["variant"])}
    tables.update(_extras_tables(results))
    failed = int((cells["status"] != "ok").sum())
    notes = (f"{failed} of {len(cells)} cells failed",) if failed else ()
    return Report(config.name, "ablation", tables, notes, _store_rows(results),
                  time.perf_counter() - started)


# Sweep logic
def sample_size_sweep(config, sizes=None, threads=1):
    """Paired variant comparison at every cohort size, smallest first."""
    sizes = tuple(sizes if sizes is not None else config.sizes)
    if not sizes:
        raise ConfigError("a sample-size sweep needs at least one size")
    if list(sizes) != sorted(set(sizes)):
        raise ConfigError(f"sizes must be strictly ascending, got {list(sizes)}")
    if config.genspec is None:
        raise ConfigError("a sample-size sweep needs a genspec source")

    started = time.perf_counter()
    rows, store = [], []
    for size in sizes:
        logger.info("sweep size %d", size)
        results = run_cells(config, threads, n=size)
        rows.extend(dict(row, size=size) for row, _ in results)
        store.extend(_store_rows(results, size=size))
    sweep = _metric_frame(rows, ("size",))
    summary = _leading(summarize(sweep, ["size", "variant"]), ("variant", "size"))
    return Report(config.name, "sweep", {"sweep": sweep, "sweep_summary": summary}, (), tuple(store),
                  time.perf_counter() - started)


def _calibration_variant(config):
    for variant in config.variants:
        if variant in MOE_EXPERTS:
            return variant
    return Variant.MOE_TRIMODAL


def _calibration_cell(config, variant, seed):
    try:
        data = prepare_seed(config, seed)
    except SepsisFusionError as exc:
        logger.error("seed %d failed during preparation: %s", seed, exc)
        return dict(_blank_row(config, variant, seed, "error", f"{type(exc).__name__}: {exc}"), wall_time=0.0), \
            None, None
    row, fitted = run_cell(config, variant, data)
    return row, fitted, data


def _operating_point(scores, labels, threshold):
    tp, fn, fp, tn = binary_counts(scores, labels, threshold)
    sensitivity, specificity = sensitivity_specificity(scores, labels, threshold)
    return {"tp": tp, "fn": fn, "fp": fp, "tn": tn, "sensitivity": sensitivity, "specificity": specificity,
            "fpr": fp / (fp + tn) if fp + tn else 0.0, "tpr": sensitivity}


# Calibration logic
def run_calibration_study(config, target_sensitivity=None, threads=1):
    """Calibrate the ensemble's threshold on validation and compare both operating points on test."""
    class_names = task_classes(config.task)
    if len(class_names) != 2:
        raise ConfigError(f"calibration needs a binary task, {config.task!r} has {len(class_names)} classes")
    target = config.target_sensitivity if target_sensitivity is None else float(target_sensitivity)
    variant = _calibration_variant(config)
    study = replace(config, variants=(variant,), target_sensitivity=target)

    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda seed: _calibration_cell(study, variant, seed), study.seeds))
    policies, confusion, reports, store = [], [], [], []
    first = None
    for seed, (row, fitted, data) in zip(study.seeds, results):
        store.append(dict(row))
        if fitted is None:
            continue
        val_scores = fitted.predict(data.val)[:, 1]
        test_scores = fitted.predict(data.test)[:, 1]
        y_val, y_test = data.val.labels(study.task), data.test.labels(study.task)
        policy = calibrate_threshold(val_scores, y_val, target)
        points = {"default": _operating_point(test_scores, y_test, DEFAULT_THRESHOLD),
                  "calibrated": _operating_point(test_scores, y_test, policy.threshold)}
        reduction = (100.0 * (points["default"]["fn"] - points["calibrated"]["fn"]) / points["default"]["fn"]
                     if points["default"]["fn"] else 0.0)
        policies.append({
            "seed": seed, "threshold": policy.threshold, "target_sensitivity": target,
            "val_sensitivity": policy.sensitivity, "val_specificity": policy.specificity,
            "test_sensitivity_default": points["default"]["sensitivity"],
            "test_specificity_default": points["default"]["specificity"],
            "test_sensitivity_calibrated": points["calibrated"]["sensitivity"],
            "test_specificity_calibrated": points["calibrated"]["specificity"],
            "test_fn_default": points["default"]["fn"], "test_fn_calibrated": points["calibrated"]["fn"],
            "fn_reduction_pct": reduction,
        })
        for name, threshold in (("default", DEFAULT_THRESHOLD), ("calibrated", policy.threshold)):
            matrix = confusion_matrix((test_scores >= threshold).astype(np.int64), y_test, class_names)
            for true_class, counts in zip(class_names, matrix.counts):
                confusion.append(dict({"seed": seed, "operating_point": name, "true_class": true_class},
                                      **{f"pred_{c}": int(v) for c, v in zip(class_names, counts)}))
            for cells in report_from_confusion(matrix).rounded():
                reports.append(dict({"seed": seed, "operating_point": name}, **cells))
        if first is None:
            first = (test_scores, y_test, policy, points)

    tables = {"policy": pd.DataFrame(policies), "confusion": pd.DataFrame(confusion),
              "classification_report": pd.DataFrame(reports)}
    notes = [REFERENCE_NOTE]
    if first is not None:
        scores, labels, policy, points = first
        tables["roc"] = pd.DataFrame(roc_points(scores, labels), columns=["fpr", "tpr"])
        tables["operating_points"] = pd.DataFrame([
            {"name": "default", "threshold": DEFAULT_THRESHOLD, "fpr": points["default"]["fpr"],
             "tpr": points["default"]["tpr"]},
            {"name": "calibrated", "threshold": policy.threshold, "fpr": points["calibrated"]["fpr"],
             "tpr": points["calibrated"]["tpr"]},
        ])
        tables["pr"] = pd.DataFrame(precision_recall_points(scores, labels), columns=["recall", "precision"])
        for row in policies:
            notes.append(f"seed {row['seed']}: missed cases {row['test_fn_default']} -> "
                         f"{row['test_fn_calibrated']} ({row['fn_reduction_pct']:.1f}% fewer) "
                         f"at threshold {row['threshold']:.4f}")
    else:
        notes.append("every calibration cell failed")
    return Report(study.name, "calibration", tables, tuple(notes), tuple(store), time.perf_counter() - started)


# Train logic
def train_variant(config, variant, seed, out_dir):
    """Fit one variant on one seed, write its model bundle and return a single-cell report."""
    variant = Variant(variant)
    data = prepare_seed(config, seed)
    started = time.perf_counter()
    fitted = fit_variant(variant, data, config)
    row = _blank_row(config, variant, seed, "ok")
    row.update(evaluate_variant(fitted, data, config.task))
    row["wall_time"] = time.perf_counter() - started
    bundle = save_fitted(fitted, Path(out_dir) / f"{config.name}_{variant.value.lower()}")
    logger.info("wrote %s bundle to %s", variant.value, bundle)
    tables = {"cells": _metric_frame([row])}
    tables.update(_extras_tables([(row, fitted)]))
    return Report(config.name, "train", tables, (), (row,), row["wall_time"]), bundle
