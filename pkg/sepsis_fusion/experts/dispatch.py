"""Fit, predict and persist any expert by kind."""
from pathlib import Path
import json

import numpy as np

from sepsis_fusion.errors import ModalityMissingError, ModelError, OutputError
from sepsis_fusion.experts.base import MODALITIES, ExpertKind, ExpertModel
from sepsis_fusion.experts.historian import fit_historian, predict_historian
from sepsis_fusion.experts.monitor import TemporalExpertParams, fit_temporal, predict_temporal
from sepsis_fusion.experts.reader import TextExpertParams, fit_text, predict_text
from sepsis_fusion.experts.visionary import VisionExpertParams, fit_vision, predict_vision
from sepsis_fusion.gbdt import GBDTParams, model_from_dict, model_to_dict

FORMAT_VERSION = 1

PARAM_TYPES = {
    ExpertKind.HISTORIAN: GBDTParams,
    ExpertKind.MONITOR: TemporalExpertParams,
    ExpertKind.READER: TextExpertParams,
    ExpertKind.VISIONARY: VisionExpertParams,
}


def params_from_dict(kind, payload):
    return PARAM_TYPES[ExpertKind(kind)].from_dict(payload)


def modality_present(kind, record):
    kind = ExpertKind(kind)
    if kind is ExpertKind.READER:
        return len(record.notes) > 0
    if kind is ExpertKind.VISIONARY:
        return record.image is not None
    return True


def fit_expert(kind, records, y, params, n_classes, schema):
    """Train one expert on records that all carry its modality."""
    kind = ExpertKind(kind)
    missing = [r.id for r in records if not modality_present(kind, r)]
    if missing:
        raise ModalityMissingError(MODALITIES[kind], missing[0])
    if kind is ExpertKind.HISTORIAN:
        return fit_historian([r.static for r in records], y, params, schema, n_classes)
    if kind is ExpertKind.MONITOR:
        return fit_temporal([r.vitals for r in records], y, params, n_classes)
    if kind is ExpertKind.READER:
        return fit_text([r.notes for r in records], y, params, n_classes)
    return fit_vision(np.array([r.image for r in records]), y, params, n_classes)


def predict_records(model, records):
    """(n, K) probabilities for records that all carry the expert's modality."""
    missing = [r.id for r in records if not modality_present(model.kind, r)]
    if missing:
        raise ModalityMissingError(MODALITIES[model.kind], missing[0])
    if not records:
        return np.zeros((0, model.n_classes))
    if model.kind is ExpertKind.HISTORIAN:
        return predict_historian(model, [r.static for r in records])
    if model.kind is ExpertKind.MONITOR:
        return predict_temporal(model, [r.vitals for r in records])
    if model.kind is ExpertKind.READER:
        return predict_text(model, [r.notes for r in records])
    return predict_vision(model, np.array([r.image for r in records]))


def expert_predict(model, record):
    return predict_records(model, [record])[0]


# Persistence

def _encode_array(name, value):
    if name == "W" and value.ndim == 2 and value.shape[0] > 1024:
        rows = np.flatnonzero(np.any(value != 0.0, axis=1))
        return {"shape": list(value.shape), "rows": rows.tolist(), "data": value[rows].ravel().tolist()}
    return {"shape": list(value.shape), "data": value.ravel().tolist()}


def _decode_array(payload):
    shape = tuple(payload["shape"])
    data = np.asarray(payload["data"], dtype=np.float64)
    if "rows" in payload:
        value = np.zeros(shape)
        value[np.asarray(payload["rows"], dtype=np.int64)] = data.reshape(-1, shape[1])
        return value
    return data.reshape(shape)


def expert_to_dict(model):
    return {
        "format_version": FORMAT_VERSION,
        "kind": model.kind.value,
        "n_classes": model.n_classes,
        "params": model.params.to_dict(),
        "prior": model.prior.tolist(),
        "weights": {name: _encode_array(name, value) for name, value in sorted(model.weights.items())},
        "preprocessing": {name: np.asarray(value).tolist() for name, value in sorted(model.preprocessing.items())},
        "booster": None if model.booster is None else model_to_dict(model.booster),
        "training_log": model.training_log,
    }


def expert_from_dict(payload):
    if payload.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported expert format_version {payload.get('format_version')!r}")
    kind = ExpertKind(payload["kind"])
    return ExpertModel(
        kind=kind,
        params=params_from_dict(kind, payload["params"]),
        n_classes=int(payload["n_classes"]),
        prior=np.asarray(payload["prior"], dtype=np.float64),
        weights={name: _decode_array(value) for name, value in payload["weights"].items()},
        booster=None if payload.get("booster") is None else model_from_dict(payload["booster"]),
        preprocessing={name: np.asarray(value, dtype=np.float64) for name, value in payload["preprocessing"].items()},
        training_log=list(payload.get("training_log", [])),
    )


def save_expert(model, path):
    try:
        Path(path).write_text(json.dumps(expert_to_dict(model), allow_nan=False), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write expert model {path}: {exc}") from exc


def load_expert(path):
    return expert_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
