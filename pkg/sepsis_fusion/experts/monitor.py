"""Monitor expert: causal conv -> bidirectional recurrent layer -> attention pooling -> softmax."""
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from sepsis_fusion.errors import ModelError
from sepsis_fusion.experts import layers
from sepsis_fusion.experts.base import (
    ExpertKind, ExpertModel, OptimizerSettings, check_labels, class_prior, is_degenerate, prior_only,
)
from sepsis_fusion.experts.training import gradient_descent, validation_split


@dataclass(frozen=True)
class TemporalExpertParams:
    filters: int = 32
    kernel_width: int = 3
    cell: str = "lstm"
    hidden: int = 128
    attention: int = 16
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    seed: int = 0

    def __post_init__(self):
        if min(self.filters, self.kernel_width, self.hidden, self.attention) < 1:
            raise ModelError("temporal expert sizes must be >= 1")
        if self.cell not in layers.CELLS:
            raise ModelError(f"cell must be one of {sorted(layers.CELLS)}, got {self.cell!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        payload["optimizer"] = OptimizerSettings(**payload.get("optimizer", {}))
        return cls(**payload)


def channel_statistics(series):
    """Mean and standard deviation of the observed entries of every channel."""
    values = np.concatenate([s.values for s in series])
    mask = np.concatenate([s.mask for s in series])
    observed = np.where(mask, values, np.nan)
    mean = np.nanmean(observed, axis=0)
    std = np.nanstd(observed, axis=0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    std = np.where(np.isfinite(std) & (std > 0), std, 1.0)
    return mean, std


def impute(series, mean):
    """Forward fill each channel, then fall back to the channel mean."""
    frame = pd.DataFrame(np.where(series.mask, series.values, np.nan))
    return frame.ffill().fillna(pd.Series(mean)).to_numpy(dtype=np.float64)


def prepare_batch(series, mean, std):
    """Padded standardised inputs (B, T, F) and step mask (B, T)."""
    T = max(s.length for s in series)
    X = np.zeros((len(series), T, len(mean)))
    step_mask = np.zeros((len(series), T))
    for b, s in enumerate(series):
        X[b, :s.length] = (impute(s, mean) - mean) / std
        step_mask[b, :s.length] = 1.0
    return X, step_mask


def init_weights(params, n_channels, n_classes, rng):
    weights = {
        "conv_W": layers.init_uniform(rng, (params.kernel_width * n_channels, params.filters),
                                      params.kernel_width * n_channels),
        "conv_b": np.zeros(params.filters),
    }
    weights.update(layers.init_bidirectional(rng, params.filters, params.hidden, params.cell))
    weights["att_W"] = layers.init_uniform(rng, (2 * params.hidden, params.attention), 2 * params.hidden)
    weights["att_b"] = np.zeros(params.attention)
    weights["att_v"] = layers.init_uniform(rng, (params.attention,), params.attention)
    weights["out_W"] = layers.init_uniform(rng, (2 * params.hidden, n_classes), 2 * params.hidden)
    weights["out_b"] = np.zeros(n_classes)
    return weights


def forward(weights, X, step_mask, params):
    conv, conv_cache = layers.causal_conv_forward(X, weights["conv_W"], weights["conv_b"], params.kernel_width)
    hidden, rnn_cache = layers.bidirectional_forward(conv, step_mask, weights, params.cell)
    pooled, alpha, att_cache = layers.attention_pool_forward(
        hidden, step_mask, weights["att_W"], weights["att_b"], weights["att_v"]
    )
    logits = pooled @ weights["out_W"] + weights["out_b"]
    return logits, alpha, (conv_cache, rnn_cache, att_cache, pooled)


def loss_and_grad(weights, X, step_mask, Y, params, with_grad=True):
    logits, _, (conv_cache, rnn_cache, att_cache, pooled) = forward(weights, X, step_mask, params)
    loss, d_logits = layers.softmax_cross_entropy(logits, Y)
    if not with_grad:
        return loss, None
    grads = {"out_W": pooled.T @ d_logits, "out_b": d_logits.sum(axis=0)}
    d_pooled = d_logits @ weights["out_W"].T
    d_hidden, att_grads = layers.attention_pool_backward(d_pooled, att_cache, weights["att_W"], weights["att_v"])
    grads.update({"att_" + k: v for k, v in att_grads.items()})
    d_conv, rnn_grads = layers.bidirectional_backward(d_hidden, rnn_cache, weights, params.cell)
    grads.update(rnn_grads)
    conv_grads = layers.causal_conv_backward(d_conv, conv_cache)
    grads.update({"conv_" + k: v for k, v in conv_grads.items()})
    return loss, grads


# Fit temporal logic
def fit_temporal(series, y, params, n_classes=None):
    if not series:
        raise ModelError("fit_temporal needs at least one series")
    n_classes = n_classes or max(2, int(np.max(y)) + 1)
    y = check_labels(y, n_classes)
    if len(y) != len(series):
        raise ModelError("series and labels differ in length")
    if is_degenerate(y):
        return prior_only(ExpertKind.MONITOR, params, y, n_classes)

    mean, std = channel_statistics(series)
    X, step_mask = prepare_batch(series, mean, std)
    Y = layers.one_hot(y, n_classes)
    rng = np.random.default_rng(params.seed)
    weights = init_weights(params, X.shape[2], n_classes, rng)

    def objective(w, index, with_grad):
        # trim padding beyond the longest series in the batch
        T = int(step_mask[index].sum(axis=1).max())
        return loss_and_grad(w, X[index, :T], step_mask[index, :T], Y[index], params, with_grad)

    train_index, val_index = validation_split(len(y), params.optimizer.validation_fraction, params.seed)
    weights, log = gradient_descent(weights, objective, train_index, val_index, params.optimizer, params.seed)
    return ExpertModel(
        ExpertKind.MONITOR, params, n_classes, class_prior(y, n_classes), weights,
        preprocessing={"mean": mean, "std": std}, training_log=log,
    )


def predict_temporal(model, series):
    if model.is_prior_only:
        return np.tile(model.prior, (len(series), 1))
    pre = model.preprocessing
    X, step_mask = prepare_batch(series, pre["mean"], pre["std"])
    logits, _, _ = forward(model.weights, X, step_mask, model.params)
    return layers.softmax(logits)
