"""Ranking metrics, classification reports and sensitivity-targeted threshold calibration."""
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
import math

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from sepsis_fusion.errors import MetricError

DEFAULT_THRESHOLD = 0.5


def _binary_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("binary labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _require_both_classes(labels):
    positives = int(labels.sum())
    if positives == 0 or positives == len(labels):
        raise MetricError("both classes must be present")
    return positives, len(labels) - positives


def roc_auc(scores, labels):
    """Mann-Whitney statistic via mid-ranks: P(s+ > s-) + 0.5 P(tie)."""
    scores, labels = _binary_inputs(scores, labels)
    positives, negatives = _require_both_classes(labels)
    ranks = stats.rankdata(scores)
    return float((ranks[labels == 1].sum() - positives * (positives + 1) / 2.0) / (positives * negatives))


def _present_classes(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) < 2:
        raise MetricError("at least two classes must be present")
    if present.min() < 0 or present.max() >= n_classes:
        raise MetricError(f"labels outside [0, {n_classes})")
    return labels, present


def macro_ovr_auc(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels, present = _present_classes(labels, probs.shape[1])
    return float(np.mean([roc_auc(probs[:, k], (labels == k).astype(np.int64)) for k in present]))


def _sweep(scores, labels):
    """Cumulative (tp, fp) at every distinct threshold, highest score first."""
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    last_of_group = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    return tp[last_of_group], fp[last_of_group], sorted_scores[last_of_group]


def auprc(scores, labels):
    """Average precision with step interpolation over the descending score sweep."""
    scores, labels = _binary_inputs(scores, labels)
    positives = int(labels.sum())
    if positives == 0:
        raise MetricError("average precision needs at least one positive")
    tp, fp, _ = _sweep(scores, labels)
    recall = tp / positives
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def macro_auprc(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels, present = _present_classes(labels, probs.shape[1])
    return float(np.mean([auprc(probs[:, k], (labels == k).astype(np.int64)) for k in present]))


def roc_points(scores, labels):
    scores, labels = _binary_inputs(scores, labels)
    positives, negatives = _require_both_classes(labels)
    tp, fp, _ = _sweep(scores, labels)
    return [(0.0, 0.0)] + [(float(f / negatives), float(t / positives)) for t, f in zip(tp, fp)]


def precision_recall_points(scores, labels):
    """(recall, precision) at every distinct threshold, starting from recall 0."""
    scores, labels = _binary_inputs(scores, labels)
    positives = int(labels.sum())
    if positives == 0:
        raise MetricError("precision-recall sweep needs at least one positive")
    tp, fp, _ = _sweep(scores, labels)
    precision = tp / (tp + fp)
    return [(0.0, float(precision[0]))] + [(float(t / positives), float(p)) for t, p in zip(tp, precision)]


def roc_area(points):
    fpr, tpr = zip(*points)
    return float(trapezoid(tpr, fpr))


# Confusion matrices and reports

@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: tuple

    @property
    def total(self):
        return int(self.counts.sum())

    def to_dict(self):
        return {"class_names": list(self.class_names), "counts": self.counts.astype(int).tolist()}


def confusion_matrix(preds, labels, class_names):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise MetricError("predictions and labels differ in length")
    K = len(class_names)
    if len(labels) and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= K):
        raise MetricError(f"class ids outside [0, {K})")
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def binary_confusion(tp, fn, fp, tn, class_names=("negative", "positive")):
    return ConfusionMatrix(np.array([[tn, fp], [fn, tp]], dtype=np.int64), tuple(class_names))


def round_half_up(value, places=2):
    return float(Decimal(str(value)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ClassificationReport:
    class_names: tuple
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    accuracy: float
    zero_division: tuple = field(default=())  # classes never predicted; precision reported as 0

    @property
    def total(self):
        return int(sum(self.support))

    @property
    def macro(self):
        return (float(np.mean(self.precision)), float(np.mean(self.recall)), float(np.mean(self.f1)))

    def rows(self):
        rows = [
            {"class": name, "precision": p, "recall": r, "f1": f, "support": s}
            for name, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support)
        ]
        macro = self.macro
        rows.append({"class": "macro avg", "precision": macro[0], "recall": macro[1], "f1": macro[2],
                     "support": self.total})
        rows.append({"class": "accuracy", "precision": None, "recall": None, "f1": self.accuracy,
                     "support": self.total})
        return rows

    def rounded(self, places=2):
        """Display cells rounded half-up, as printed in result tables."""
        out = []
        for row in self.rows():
            out.append({key: round_half_up(value, places) if isinstance(value, float) else value
                        for key, value in row.items()})
        return out


def report_from_confusion(matrix):
    counts = matrix.counts.astype(np.float64)
    true_positive = np.diag(counts)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    precision = np.divide(true_positive, predicted, out=np.zeros_like(true_positive), where=predicted > 0)
    recall = np.divide(true_positive, support, out=np.zeros_like(true_positive), where=support > 0)
    denominator = predicted + support
    f1 = np.divide(2.0 * true_positive, denominator, out=np.zeros_like(true_positive), where=denominator > 0)
    total = counts.sum()
    return ClassificationReport(
        class_names=matrix.class_names,
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        support=tuple(int(v) for v in support),
        accuracy=float(true_positive.sum() / total) if total else 0.0,
        zero_division=tuple(name for name, p in zip(matrix.class_names, predicted) if p == 0),
    )


def classification_report(preds, labels, class_names):
    if len(preds) == 0:
        raise MetricError("classification report needs at least one sample")
    return report_from_confusion(confusion_matrix(preds, labels, class_names))


# Threshold calibration

def binary_counts(scores, labels, threshold):
    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    tn = int(np.sum(~predicted & (labels == 0)))
    return tp, fn, fp, tn


def sensitivity_specificity(scores, labels, threshold):
    scores, labels = _binary_inputs(scores, labels)
    tp, fn, fp, tn = binary_counts(scores, labels, threshold)
    sensitivity = tp / (tp + fn) if tp + fn else 0.0
    specificity = tn / (tn + fp) if tn + fp else 0.0
    return sensitivity, specificity


@dataclass(frozen=True)
class ThresholdPolicy:
    threshold: float
    target_sensitivity: float
    sensitivity: float
    specificity: float
    fn_at_threshold: int
    fn_at_default: int
    default_threshold: float = DEFAULT_THRESHOLD

    @property
    def fn_reduction_pct(self):
        if self.fn_at_default == 0:
            return 0.0
        return 100.0 * (self.fn_at_default - self.fn_at_threshold) / self.fn_at_default

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "target_sensitivity": self.target_sensitivity,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "fn_at_threshold": self.fn_at_threshold,
            "fn_at_default": self.fn_at_default,
            "default_threshold": self.default_threshold,
            "fn_reduction_pct": self.fn_reduction_pct,
        }


def calibrate_threshold(scores, labels, target_sensitivity):
    """Largest threshold whose sensitivity (score >= threshold) still meets the target."""
    if not 0.0 <= target_sensitivity <= 1.0:
        raise MetricError(f"target sensitivity must lie in [0, 1], got {target_sensitivity}")
    scores, labels = _binary_inputs(scores, labels)
    positives, _ = _require_both_classes(labels)

    needed = math.ceil(target_sensitivity * positives)
    while needed > 0 and (needed - 1) / positives >= target_sensitivity:
        needed -= 1
    while needed / positives < target_sensitivity:
        needed += 1

    if needed == 0:
        threshold = float(np.nextafter(scores.max(), np.inf))
    else:
        threshold = float(np.sort(scores[labels == 1])[::-1][needed - 1])

    sensitivity, specificity = sensitivity_specificity(scores, labels, threshold)
    return ThresholdPolicy(
        threshold=threshold,
        target_sensitivity=float(target_sensitivity),
        sensitivity=sensitivity,
        specificity=specificity,
        fn_at_threshold=binary_counts(scores, labels, threshold)[1],
        fn_at_default=binary_counts(scores, labels, DEFAULT_THRESHOLD)[1],
    )


def evaluate_probabilities(probs, labels):
    """Headline ranking metrics for a (n, K) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] == 2:
        return {"auc": roc_auc(probs[:, 1], labels), "auprc": auprc(probs[:, 1], labels),
                "accuracy": float(np.mean(probs.argmax(axis=1) == labels))}
    return {"auc": macro_ovr_auc(probs, labels), "auprc": macro_auprc(probs, labels),
            "accuracy": float(np.mean(probs.argmax(axis=1) == labels))}
