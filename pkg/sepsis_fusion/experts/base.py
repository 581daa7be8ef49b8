"""Shared expert types: kind tags, optimizer settings, the fitted model container."""
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from sepsis_fusion.errors import ModelError

PRIOR_SMOOTHING = 1e-6


class ExpertKind(str, Enum):
    HISTORIAN = "historian"
    MONITOR = "monitor"
    READER = "reader"
    VISIONARY = "visionary"


# Modality each expert consumes
MODALITIES = {
    ExpertKind.HISTORIAN: "static",
    ExpertKind.MONITOR: "vitals",
    ExpertKind.READER: "notes",
    ExpertKind.VISIONARY: "image",
}


@dataclass(frozen=True)
class OptimizerSettings:
    step_size: float = 0.05
    batch_size: int = 32
    epochs: int = 50
    patience: int = 5
    validation_fraction: float = 0.1

    def __post_init__(self):
        if not self.step_size > 0:
            raise ModelError(f"step_size must be > 0, got {self.step_size}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ModelError("batch_size and epochs must be >= 1")
        if self.patience < 0:
            raise ModelError("patience must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ModelError("validation_fraction must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class ExpertModel:
    kind: ExpertKind
    params: object
    n_classes: int
    prior: np.ndarray
    weights: dict = field(default_factory=dict)
    booster: object = None
    preprocessing: dict = field(default_factory=dict)
    training_log: list = field(default_factory=list)

    @property
    def is_prior_only(self):
        return not self.weights and self.booster is None


def class_prior(y, n_classes):
    counts = np.bincount(np.asarray(y, dtype=np.int64), minlength=n_classes).astype(np.float64)
    return (counts + PRIOR_SMOOTHING) / (counts.sum() + n_classes * PRIOR_SMOOTHING)


def check_labels(y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    if y.ndim != 1 or len(y) == 0:
        raise ModelError("labels must be a non-empty vector")
    if y.min() < 0 or y.max() >= n_classes:
        raise ModelError(f"labels outside [0, {n_classes})")
    return y


def is_degenerate(y):
    return len(np.unique(y)) < 2


def prior_only(kind, params, y, n_classes):
    return ExpertModel(kind, params, n_classes, class_prior(y, n_classes))
