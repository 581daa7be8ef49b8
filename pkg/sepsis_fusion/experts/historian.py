"""Historian expert: a GBDT over the static vector (numeric plus categorical codes)."""
import numpy as np

from sepsis_fusion.errors import ModelError
from sepsis_fusion.experts.base import ExpertKind, ExpertModel, check_labels, class_prior, is_degenerate, prior_only
from sepsis_fusion.gbdt import FeatureSchema, fit_gbdt


def static_matrix(statics):
    return np.array([np.concatenate([s.numeric, np.asarray(s.categorical, dtype=np.float64)])
                     for s in statics])


def static_feature_schema(schema):
    n_numeric = len(schema.numeric_features)
    categorical = tuple((n_numeric + j, c.cardinality) for j, c in enumerate(schema.categorical_features))
    return FeatureSchema(schema.static_names, categorical)


def fit_historian(statics, y, params, schema, n_classes=None):
    if not statics:
        raise ModelError("fit_historian needs at least one record")
    n_classes = n_classes or max(2, int(np.max(y)) + 1)
    y = check_labels(y, n_classes)
    if is_degenerate(y):
        return prior_only(ExpertKind.HISTORIAN, params, y, n_classes)
    booster = fit_gbdt(static_matrix(statics), y, params, n_classes=n_classes,
                       schema=static_feature_schema(schema))
    return ExpertModel(ExpertKind.HISTORIAN, params, n_classes, class_prior(y, n_classes),
                       booster=booster, training_log=[{"train_loss": loss} for loss in booster.training_log])


def predict_historian(model, statics):
    if model.is_prior_only:
        return np.tile(model.prior, (len(statics), 1))
    return model.booster.predict_proba(static_matrix(statics))
