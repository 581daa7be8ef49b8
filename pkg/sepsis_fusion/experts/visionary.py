"""Visionary expert: one tanh hidden layer over precomputed image feature vectors."""
from dataclasses import asdict, dataclass, field

import numpy as np

from sepsis_fusion.errors import ModelError
from sepsis_fusion.experts import layers
from sepsis_fusion.experts.base import (
    ExpertKind, ExpertModel, OptimizerSettings, check_labels, class_prior, is_degenerate, prior_only,
)
from sepsis_fusion.experts.training import gradient_descent, validation_split


@dataclass(frozen=True)
class VisionExpertParams:
    width: int = 32
    activation: str = "tanh"
    l2: float = 1e-4
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    seed: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ModelError(f"hidden width must be >= 1, got {self.width}")
        if self.activation != "tanh":
            raise ModelError(f"unsupported activation {self.activation!r}")
        if self.l2 < 0:
            raise ModelError("l2 penalty must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        payload["optimizer"] = OptimizerSettings(**payload.get("optimizer", {}))
        return cls(**payload)


def init_weights(params, n_inputs, n_classes, rng):
    return {
        "W1": layers.init_uniform(rng, (n_inputs, params.width), n_inputs),
        "b1": np.zeros(params.width),
        "W2": layers.init_uniform(rng, (params.width, n_classes), params.width),
        "b2": np.zeros(n_classes),
    }


def forward(weights, X):
    hidden = np.tanh(X @ weights["W1"] + weights["b1"])
    return hidden @ weights["W2"] + weights["b2"], hidden


def loss_and_grad(weights, X, Y, l2, with_grad=True):
    logits, hidden = forward(weights, X)
    loss, d_logits = layers.softmax_cross_entropy(logits, Y)
    loss += 0.5 * l2 * float(np.sum(weights["W1"] ** 2) + np.sum(weights["W2"] ** 2))
    if not with_grad:
        return loss, None
    d_pre = (d_logits @ weights["W2"].T) * (1.0 - hidden * hidden)
    return loss, {
        "W1": X.T @ d_pre + l2 * weights["W1"],
        "b1": d_pre.sum(axis=0),
        "W2": hidden.T @ d_logits + l2 * weights["W2"],
        "b2": d_logits.sum(axis=0),
    }


def standardise(features, mean, std):
    return (np.asarray(features, dtype=np.float64) - mean) / std


# Fit vision logic
def fit_vision(features, y, params, n_classes=None):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) == 0:
        raise ModelError("fit_vision needs a non-empty (n, d) feature matrix")
    n_classes = n_classes or max(2, int(np.max(y)) + 1)
    y = check_labels(y, n_classes)
    if len(y) != len(features):
        raise ModelError("features and labels differ in length")
    if is_degenerate(y):
        return prior_only(ExpertKind.VISIONARY, params, y, n_classes)

    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    X = standardise(features, mean, std)
    Y = layers.one_hot(y, n_classes)
    weights = init_weights(params, X.shape[1], n_classes, np.random.default_rng(params.seed))

    def objective(w, index, with_grad):
        return loss_and_grad(w, X[index], Y[index], params.l2, with_grad)

    train_index, val_index = validation_split(len(y), params.optimizer.validation_fraction, params.seed)
    weights, log = gradient_descent(weights, objective, train_index, val_index, params.optimizer, params.seed)
    return ExpertModel(
        ExpertKind.VISIONARY, params, n_classes, class_prior(y, n_classes), weights,
        preprocessing={"mean": mean, "std": std}, training_log=log,
    )


def predict_vision(model, features):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if model.is_prior_only:
        return np.tile(model.prior, (len(features), 1))
    pre = model.preprocessing
    logits, _ = forward(model.weights, standardise(features, pre["mean"], pre["std"]))
    return layers.softmax(logits)
