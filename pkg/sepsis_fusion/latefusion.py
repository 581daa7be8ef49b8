"""Late fusion: out-of-fold expert stacking and a context-aware GBDT gate."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
import logging
import json

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import KFold, StratifiedKFold

from sepsis_fusion.cohort import task_classes
from sepsis_fusion.errors import FoldError, ModelError, OutputError, SchemaError
from sepsis_fusion.experts import (
    ExpertKind, class_prior, fit_expert, load_expert, modality_present, predict_records, save_expert,
)
from sepsis_fusion.gbdt import (
    FeatureSchema, fit_gbdt, gbdt_gain_importance, model_from_dict, model_to_dict,
)
from sepsis_fusion.metrics import evaluate_probabilities
from sepsis_fusion.utils.seeding import derive_seed

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SIMPLEX_TOLERANCE = 1e-6
TRIMODAL = (ExpertKind.HISTORIAN, ExpertKind.MONITOR, ExpertKind.READER)
QUADMODAL = TRIMODAL + (ExpertKind.VISIONARY,)


@dataclass(frozen=True)
class MetaLayout:
    experts: tuple
    class_names: tuple
    context_numeric: tuple
    context_categorical: tuple = ()  # (name, cardinality)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def n_context(self):
        return len(self.context_numeric) + len(self.context_categorical)

    @property
    def width(self):
        E, K = len(self.experts), self.n_classes
        return E * K + E + self.n_context

    def block(self, kind):
        start = self.experts.index(ExpertKind(kind)) * self.n_classes
        return slice(start, start + self.n_classes)

    def flag_index(self, kind):
        return len(self.experts) * self.n_classes + self.experts.index(ExpertKind(kind))

    @property
    def context_start(self):
        return len(self.experts) * (self.n_classes + 1)

    def columns(self):
        names = [f"{kind.value}:{name}" for kind in self.experts for name in self.class_names]
        names += [f"{kind.value}:missing" for kind in self.experts]
        names += list(self.context_numeric) + [name for name, _ in self.context_categorical]
        return names

    def feature_schema(self):
        first = self.context_start + len(self.context_numeric)
        categorical = tuple((first + j, card) for j, (_, card) in enumerate(self.context_categorical))
        return FeatureSchema(tuple(self.columns()), categorical)

    def to_dict(self):
        return {
            "experts": [kind.value for kind in self.experts],
            "class_names": list(self.class_names),
            "context_numeric": list(self.context_numeric),
            "context_categorical": [list(pair) for pair in self.context_categorical],
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            tuple(ExpertKind(k) for k in payload["experts"]),
            tuple(payload["class_names"]),
            tuple(payload["context_numeric"]),
            tuple((name, int(card)) for name, card in payload.get("context_categorical", [])),
        )


def make_layout(schema, task, experts=TRIMODAL):
    return MetaLayout(
        tuple(ExpertKind(k) for k in experts),
        task_classes(task),
        tuple(schema.numeric_features),
        tuple((c.name, c.cardinality) for c in schema.categorical_features),
    )


def context_vector(record):
    return np.concatenate([record.static.numeric, np.asarray(record.static.categorical, dtype=np.float64)])


def build_meta_features(expert_probs, context, layout):
    """One meta row: expert blocks (uniform fill when absent), missing flags, context."""
    K = layout.n_classes
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (layout.n_context,):
        raise SchemaError(f"context has shape {context.shape}, layout expects {layout.n_context} features")
    row = np.empty(layout.width)
    for kind in layout.experts:
        probs = expert_probs.get(kind)
        if probs is None:
            row[layout.block(kind)] = 1.0 / K
            row[layout.flag_index(kind)] = 1.0
            continue
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (K,):
            raise ModelError(f"{kind.value} block has shape {probs.shape}, expected ({K},)")
        if probs.min() < -SIMPLEX_TOLERANCE or abs(probs.sum() - 1.0) > SIMPLEX_TOLERANCE:
            raise ModelError(f"{kind.value} probabilities are off the simplex: {probs.tolist()}")
        row[layout.block(kind)] = probs
        row[layout.flag_index(kind)] = 0.0
    row[layout.context_start:] = context
    return row


def expert_probability_table(experts, records, layout, mask=()):
    """Per expert, an (n, K) array with NaN rows where the modality is absent or masked."""
    table = {}
    for kind in layout.experts:
        probs = np.full((len(records), layout.n_classes), np.nan)
        if kind not in mask:
            present = [i for i, r in enumerate(records) if modality_present(kind, r)]
            if present:
                probs[present] = predict_records(experts[kind], [records[i] for i in present])
        table[kind] = probs
    return table


def meta_matrix(table, records, layout):
    rows = []
    for i, record in enumerate(records):
        probs = {kind: None if np.isnan(table[kind][i, 0]) else table[kind][i] for kind in layout.experts}
        rows.append(build_meta_features(probs, context_vector(record), layout))
    return np.array(rows).reshape(len(records), layout.width)


# Out-of-fold stacking

@dataclass
class MetaDataset:
    layout: MetaLayout
    X: np.ndarray
    y: np.ndarray
    record_ids: tuple
    fold_of: np.ndarray
    trained_on: dict  # fold -> frozenset of record ids its experts saw
    experts: dict  # deployment experts retrained on every record
    in_fold: bool = False


def assign_folds(y, folds, seed):
    counts = np.bincount(y)
    counts = counts[counts > 0]
    if counts.min() >= folds:
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    else:
        splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for fold, (_, held_out) in enumerate(splitter.split(np.zeros(len(y)), y)):
        fold_of[held_out] = fold
    return fold_of


def _expert_seed(params, *parts):
    return replace(params, seed=derive_seed(params.seed, *parts))


def _fit_job(kind, records, y, params, n_classes, schema):
    present = [i for i, r in enumerate(records) if modality_present(kind, r)]
    if not present:
        raise FoldError(f"no training record carries the {kind.value} modality")
    return fit_expert(kind, [records[i] for i in present], y[present], params, n_classes, schema)


def oof_stack(cohort, expert_configs, task, folds=5, seed=0, *, experts=TRIMODAL, threads=1, in_fold=False):
    """Meta dataset whose rows come from experts that never trained on the row's record.

    With in_fold set, rows come from the deployment experts instead, which did see them.
    """
    if folds < 2:
        raise FoldError(f"need at least 2 folds, got {folds}")
    records = list(cohort)
    y = cohort.labels(task)
    if folds > len(records):
        raise FoldError(f"{folds} folds for {len(records)} records")
    layout = make_layout(cohort.schema, task, experts)
    K = layout.n_classes
    fold_of = assign_folds(y, folds, seed)
    classes = set(np.unique(y).tolist())
    for fold in range(folds):
        missing = classes - set(np.unique(y[fold_of != fold]).tolist())
        if missing:
            raise FoldError(f"fold {fold} training part lacks classes {sorted(missing)}; reduce the fold count")

    jobs = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for kind in layout.experts:
            params = expert_configs[kind]
            jobs[("final", kind)] = pool.submit(
                _fit_job, kind, records, y, _expert_seed(params, seed, "final", kind.value), K, cohort.schema
            )
            if in_fold:
                continue
            for fold in range(folds):
                train = np.flatnonzero(fold_of != fold)
                jobs[(fold, kind)] = pool.submit(
                    _fit_job, kind, [records[i] for i in train], y[train],
                    _expert_seed(params, seed, fold, kind.value), K, cohort.schema,
                )
        fitted = {key: job.result() for key, job in jobs.items()}

    final = {kind: fitted[("final", kind)] for kind in layout.experts}
    if in_fold:
        X = meta_matrix(expert_probability_table(final, records, layout), records, layout)
        trained_on = {fold: frozenset(r.id for r in records) for fold in range(folds)}
    else:
        X = np.empty((len(records), layout.width))
        trained_on = {}
        for fold in range(folds):
            held = np.flatnonzero(fold_of == fold)
            held_records = [records[i] for i in held]
            fold_experts = {kind: fitted[(fold, kind)] for kind in layout.experts}
            X[held] = meta_matrix(expert_probability_table(fold_experts, held_records, layout),
                                  held_records, layout)
            trained_on[fold] = frozenset(records[i].id for i in np.flatnonzero(fold_of != fold))

    logger.info("stacked %d records over %d folds (%s)", len(records), folds,
                ", ".join(k.value for k in layout.experts))
    return MetaDataset(layout, X, y, tuple(r.id for r in records), fold_of, trained_on, final, in_fold)


def fit_gate(meta, params):
    return fit_gbdt(meta.X, meta.y, params, n_classes=meta.layout.n_classes,
                    schema=meta.layout.feature_schema())


@dataclass
class EnsembleModel:
    experts: dict
    gate: object
    layout: MetaLayout
    folds: int
    prior: np.ndarray
    task: str
    provenance: dict = field(default_factory=dict)


def fit_ensemble(cohort, expert_configs, gate_params, task, *, folds=5, seed=0, experts=TRIMODAL,
                 threads=1, in_fold=False):
    """oof_stack followed by fit_gate; returns (model, meta dataset)."""
    meta = oof_stack(cohort, expert_configs, task, folds, seed, experts=experts, threads=threads,
                     in_fold=in_fold)
    gate = fit_gate(meta, gate_params)
    model = EnsembleModel(
        meta.experts, gate, meta.layout, folds, class_prior(meta.y, meta.layout.n_classes), task,
        {"cohort": cohort.provenance, "seed": seed, "n_train": len(cohort)},
    )
    return model, meta


def ensemble_predict_many(model, records, mask=()):
    """(n, K) gate probabilities; rows with every expert absent or masked get the class prior."""
    mask = {ExpertKind(k) for k in mask}
    records = list(records)
    table = expert_probability_table(model.experts, records, model.layout, mask)
    X = meta_matrix(table, records, model.layout)
    probs = model.gate.predict_proba(X) if len(records) else np.zeros((0, model.layout.n_classes))
    none_present = np.all([np.isnan(table[k][:, 0]) for k in model.layout.experts], axis=0)
    probs[none_present] = model.prior
    return probs


def ensemble_predict(model, record, mask=()):
    expected = len(model.layout.context_numeric)
    if record.static.numeric.shape != (expected,):
        raise SchemaError(f"expected {expected} static numeric features", record.id)
    return ensemble_predict_many(model, [record], mask)[0]


# Late concatenation baseline

@dataclass
class LateConcatModel:
    experts: dict
    layout: MetaLayout
    classifier: LogisticRegression

    def block_columns(self):
        return np.r_[tuple(np.arange(self.layout.block(k).start, self.layout.block(k).stop)
                           for k in self.layout.experts)]


def late_concat_baseline(cohort, expert_configs, task, folds=5, seed=0, *, experts=TRIMODAL, threads=1,
                         meta=None):
    """Multinomial logistic fusion of the OOF expert blocks only: no context, no flags."""
    if meta is None:
        meta = oof_stack(cohort, expert_configs, task, folds, seed, experts=experts, threads=threads)
    model = LateConcatModel(meta.experts, meta.layout, LogisticRegression(max_iter=1000))
    model.classifier.fit(meta.X[:, model.block_columns()], meta.y)
    return model


def late_concat_predict_many(model, records):
    records = list(records)
    X = meta_matrix(expert_probability_table(model.experts, records, model.layout), records, model.layout)
    probs = np.zeros((len(records), model.layout.n_classes))
    probs[:, model.classifier.classes_] = model.classifier.predict_proba(X[:, model.block_columns()])
    return probs


# Routing interpretability

def gate_block_importance(model):
    """Gate gain share per expert block, for the missing flags and for the context."""
    layout = model.layout
    shares = {kind.value: 0.0 for kind in layout.experts}
    shares.update({"missing_flags": 0.0, "context": 0.0})
    for feature, share in gbdt_gain_importance(model.gate).items():
        if feature >= layout.context_start:
            shares["context"] += share
        elif feature >= len(layout.experts) * layout.n_classes:
            shares["missing_flags"] += share
        else:
            shares[layout.experts[feature // layout.n_classes].value] += share
    return shares


def _total_variation(a, b):
    return 0.5 * np.abs(a - b).sum(axis=1)


def expert_reliability_by_context(model, records, feature=None, bins=4):
    """Mean shift of the gate output when each expert is masked, per context stratum."""
    records = list(records)
    layout = model.layout
    names = list(layout.context_numeric) + [name for name, _ in layout.context_categorical]
    feature = feature or names[0]
    if feature not in names:
        raise SchemaError(f"unknown context feature {feature!r}")
    values = np.array([context_vector(r)[names.index(feature)] for r in records])
    if feature in layout.context_numeric:
        strata = pd.qcut(values, q=bins, duplicates="drop").astype(str)
    else:
        strata = values.astype(int).astype(str)

    full = ensemble_predict_many(model, records)
    frames = []
    for kind in layout.experts:
        shift = _total_variation(full, ensemble_predict_many(model, records, mask=(kind,)))
        frames.append(pd.DataFrame({"stratum": strata, "expert": kind.value, "shift": shift}))
    table = pd.concat(frames, ignore_index=True)
    summary = (table.groupby(["stratum", "expert"], sort=True)["shift"]
               .agg(n="size", mean_abs_change="mean").reset_index())
    summary.insert(0, "feature", feature)
    return summary


def degradation_report(model, records, labels):
    """Test metrics under each single-expert mask pattern and the change against no mask."""
    records = list(records)
    baseline = evaluate_probabilities(ensemble_predict_many(model, records), labels)["auc"]
    rows = [{"masked": "none", "auc": baseline, "delta": 0.0}]
    for kind in model.layout.experts:
        auc = evaluate_probabilities(ensemble_predict_many(model, records, mask=(kind,)), labels)["auc"]
        rows.append({"masked": kind.value, "auc": auc, "delta": auc - baseline})
    return pd.DataFrame(rows)


# Bundle persistence

def save_ensemble(model, directory):
    directory = Path(directory)
    try:
        (directory / "experts").mkdir(parents=True, exist_ok=True)
        for kind, expert in model.experts.items():
            save_expert(expert, directory / "experts" / f"{kind.value}.json")
        (directory / "gate.json").write_text(json.dumps(model_to_dict(model.gate), allow_nan=False),
                                             encoding="utf-8")
        manifest = {
            "format_version": FORMAT_VERSION,
            "layout": model.layout.to_dict(),
            "folds": model.folds,
            "prior": model.prior.tolist(),
            "task": model.task,
            "provenance": model.provenance,
        }
        (directory / "layout.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write ensemble bundle {directory}: {exc}") from exc


def load_ensemble(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "layout.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported ensemble format_version {manifest.get('format_version')!r}")
    layout = MetaLayout.from_dict(manifest["layout"])
    experts = {kind: load_expert(directory / "experts" / f"{kind.value}.json") for kind in layout.experts}
    gate = model_from_dict(json.loads((directory / "gate.json").read_text(encoding="utf-8")))
    return EnsembleModel(experts, gate, layout, int(manifest["folds"]),
                         np.asarray(manifest["prior"], dtype=np.float64), manifest["task"],
                         manifest.get("provenance", {}))
