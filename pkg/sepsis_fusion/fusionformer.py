"""End-to-end deep fusion network.

The pooled state h of a bidirectional GRU over the vitals queries the record's note
embeddings through gated additive attention:

    e_j   = v . tanh(W_q h + W_k E_j)
    alpha = softmax(e)            (zero notes: alpha = 0, c = 0)
    c     = sum_j alpha_j E_j
    g     = sigmoid(W_g [h; c] + b_g)
    fused = g * h + (1 - g) * (W_v c)

fused is concatenated with a static code, a vision code (zero when the image is absent)
and the image-missing flag, then mapped to class probabilities.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
import logging
import json

import numpy as np
import pandas as pd
from scipy import sparse, special

from sepsis_fusion.cohort import split_cohort, task_classes
from sepsis_fusion.errors import MetricError, ModelError, OutputError
from sepsis_fusion.experts import layers
from sepsis_fusion.experts.base import OptimizerSettings, class_prior
from sepsis_fusion.experts.monitor import channel_statistics, prepare_batch
from sepsis_fusion.experts.training import gradient_descent
from sepsis_fusion.metrics import macro_ovr_auc, roc_auc
from sepsis_fusion.utils.hashing import token_bucket

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CURVE_COLUMNS = ("epoch", "train_auc", "val_auc", "train_loss", "val_loss")


def _default_optimizer():
    return OptimizerSettings(step_size=0.05, batch_size=32, epochs=100, patience=10)


@dataclass(frozen=True)
class FusionFormerParams:
    hidden: int = 64
    temporal_attention: int = 16
    embedding: int = 32
    hash_dim: int = 2 ** 15
    attention: int = 32
    static_code: int = 8
    vision_code: int = 8
    optimizer: OptimizerSettings = field(default_factory=_default_optimizer)
    seed: int = 0

    def __post_init__(self):
        sizes = (self.hidden, self.temporal_attention, self.embedding, self.hash_dim,
                 self.attention, self.static_code, self.vision_code)
        if min(sizes) < 1:
            raise ModelError("fusion network dimensions must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        payload = dict(payload)
        payload["optimizer"] = OptimizerSettings(**payload.get("optimizer", {}))
        return cls(**payload)


@dataclass
class FusionFormerModel:
    params: FusionFormerParams
    n_classes: int
    weights: dict
    preprocessing: dict
    cardinalities: tuple
    prior: np.ndarray


@dataclass
class TrainingCurves:
    rows: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=list(CURVE_COLUMNS))

    @property
    def best_epoch(self):
        frame = self.to_frame()
        if not len(frame):
            return 0
        scores = frame["val_auc"].astype(float)
        if scores.isna().all():
            return int(frame["epoch"].iloc[-1])
        return int(frame.loc[scores.idxmax(), "epoch"])

    def write_csv(self, path):
        try:
            with open(path, "w", encoding="utf-8", newline="") as handle:
                handle.write("# columns: " + ", ".join(CURVE_COLUMNS) + "\n")
                self.to_frame().to_csv(handle, index=False, float_format="%.6f", lineterminator="\n")
        except OSError as exc:
            raise OutputError(f"cannot write training curves {path}: {exc}") from exc


def canonical_notes(notes):
    return sorted(notes, key=lambda note: (note.timestamp, note.tokens))


# Gated additive attention

def attention_forward(h, E, note_mask, w):
    """Batched gate over (B, 2H) queries and (B, J, d) note embeddings."""
    U = np.tanh((h @ w["W_q"])[:, None, :] + E @ w["W_k"])
    alpha = layers.masked_softmax(U @ w["v"], note_mask > 0)
    c = np.einsum("bj,bjd->bd", alpha, E)
    joint = np.concatenate([h, c], axis=1)
    g = special.expit(joint @ w["W_g"] + w["b_g"])
    value = c @ w["W_v"]
    fused = g * h + (1.0 - g) * value
    return fused, alpha, g, (h, E, U, alpha, c, joint, g, value)


def attention_backward(d_fused, cache, w):
    h, E, U, alpha, c, joint, g, value = cache
    H2 = h.shape[1]
    d_g = d_fused * (h - value)
    dh = d_fused * g
    d_value = d_fused * (1.0 - g)
    dc = d_value @ w["W_v"].T
    da_g = d_g * g * (1.0 - g)
    d_joint = da_g @ w["W_g"].T
    dh += d_joint[:, :H2]
    dc += d_joint[:, H2:]

    dE = alpha[:, :, None] * dc[:, None, :]
    d_scores = layers.softmax_backward(np.einsum("bjd,bd->bj", E, dc), alpha)
    d_pre = d_scores[:, :, None] * w["v"] * (1.0 - U * U)
    d_query = d_pre.sum(axis=1)
    dh += d_query @ w["W_q"].T
    dE += d_pre @ w["W_k"].T
    grads = {
        "W_q": h.T @ d_query,
        "W_k": np.einsum("bjd,bja->da", E, d_pre),
        "v": np.einsum("bj,bja->a", d_scores, U),
        "W_g": joint.T @ da_g,
        "b_g": da_g.sum(axis=0),
        "W_v": c.T @ d_value,
    }
    return dh, dE, grads


def gated_additive_attention(h, notes, weights):
    """Fused vector for one query h (2H,) and a (J, d) stack of note embeddings."""
    h = np.asarray(h, dtype=np.float64)
    notes = np.asarray(notes, dtype=np.float64).reshape(-1, weights["W_k"].shape[0])
    if h.shape != (weights["W_q"].shape[0],):
        raise ModelError(f"query of shape {h.shape} does not match W_q {weights['W_q'].shape}")
    if weights["W_v"].shape != (notes.shape[1], h.shape[0]):
        raise ModelError("W_v must map note embeddings onto the query dimension")
    E = notes[None, :, :] if len(notes) else np.zeros((1, 1, notes.shape[1]))
    note_mask = np.ones((1, E.shape[1])) if len(notes) else np.zeros((1, 1))
    fused, _, _, _ = attention_forward(h[None, :], E, note_mask, weights)
    return fused[0]


# Encoding

@dataclass
class _Encoded:
    X: np.ndarray
    step_mask: np.ndarray
    static: np.ndarray
    image: np.ndarray
    present: np.ndarray
    notes: list


def _static_inputs(records, mean, std, cardinalities):
    numeric = np.array([(r.static.numeric - mean) / std for r in records]).reshape(len(records), -1)
    blocks = [numeric]
    for j, cardinality in enumerate(cardinalities):
        codes = np.array([r.static.categorical[j] for r in records], dtype=np.int64)
        blocks.append(np.eye(cardinality)[codes])
    return np.concatenate(blocks, axis=1)


def encode_records(records, preprocessing, cardinalities, params):
    pre = preprocessing
    X, step_mask = prepare_batch([r.vitals for r in records], pre["vitals_mean"], pre["vitals_std"])
    image_length = len(pre["image_mean"])
    present = np.array([r.image is not None for r in records], dtype=np.float64)
    image = np.zeros((len(records), image_length))
    for i, r in enumerate(records):
        if r.image is not None:
            image[i] = (r.image - pre["image_mean"]) / pre["image_std"]
    notes = [
        [np.array([token_bucket(t, params.hash_dim) for t in note.tokens], dtype=np.int64)
         for note in canonical_notes(r.notes)]
        for r in records
    ]
    static = _static_inputs(records, pre["static_mean"], pre["static_std"], cardinalities)
    return _Encoded(X, step_mask, static, image, present, notes)


def fit_preprocessing(records):
    vitals_mean, vitals_std = channel_statistics([r.vitals for r in records])
    numeric = np.array([r.static.numeric for r in records])
    static_std = numeric.std(axis=0)
    images = np.array([r.image for r in records if r.image is not None])
    if len(images):
        image_mean, image_std = images.mean(axis=0), images.std(axis=0)
    else:
        length = next((len(r.image) for r in records if r.image is not None), 1)
        image_mean, image_std = np.zeros(length), np.ones(length)
    return {
        "vitals_mean": vitals_mean,
        "vitals_std": vitals_std,
        "static_mean": numeric.mean(axis=0),
        "static_std": np.where(static_std > 0, static_std, 1.0),
        "image_mean": image_mean,
        "image_std": np.where(image_std > 0, image_std, 1.0),
    }


def _batch(encoded, index, hash_dim):
    T = int(encoded.step_mask[index].sum(axis=1).max())
    J = max(1, max(len(encoded.notes[i]) for i in index))
    B = len(index)
    note_mask = np.zeros((B, J))
    rows, cols, vals = [], [], []
    for b, i in enumerate(index):
        for j, ids in enumerate(encoded.notes[i]):
            note_mask[b, j] = 1.0
            if len(ids):
                rows.extend([b * J + j] * len(ids))
                cols.extend(ids.tolist())
                vals.extend([1.0 / len(ids)] * len(ids))
    averaging = sparse.csr_matrix((vals, (rows, cols)), shape=(B * J, hash_dim))
    return {
        "X": encoded.X[index, :T],
        "step_mask": encoded.step_mask[index, :T],
        "static": encoded.static[index],
        "image": encoded.image[index],
        "present": encoded.present[index],
        "note_mask": note_mask,
        "averaging": averaging,
        "J": J,
    }


# Network

def init_weights(params, n_channels, n_static, image_length, n_classes, rng):
    H2 = 2 * params.hidden
    d = params.embedding
    w = layers.init_bidirectional(rng, n_channels, params.hidden, "gru", prefix="t_")
    w.update({
        "t_att_W": layers.init_uniform(rng, (H2, params.temporal_attention), H2),
        "t_att_b": np.zeros(params.temporal_attention),
        "t_att_v": layers.init_uniform(rng, (params.temporal_attention,), params.temporal_attention),
        "emb": rng.normal(0.0, 0.1, size=(params.hash_dim, d)),
        "W_q": layers.init_uniform(rng, (H2, params.attention), H2),
        "W_k": layers.init_uniform(rng, (d, params.attention), d),
        "v": layers.init_uniform(rng, (params.attention,), params.attention),
        "W_g": layers.init_uniform(rng, (H2 + d, H2), H2 + d),
        "b_g": np.zeros(H2),
        "W_v": layers.init_uniform(rng, (d, H2), d),
        "W_s": layers.init_uniform(rng, (n_static, params.static_code), n_static),
        "b_s": np.zeros(params.static_code),
        "W_i": layers.init_uniform(rng, (image_length, params.vision_code), image_length),
        "b_i": np.zeros(params.vision_code),
    })
    width = H2 + params.static_code + params.vision_code + 1
    w["W_o"] = layers.init_uniform(rng, (width, n_classes), width)
    w["b_o"] = np.zeros(n_classes)
    return w


def forward(w, batch):
    hidden, rnn_cache = layers.bidirectional_forward(batch["X"], batch["step_mask"], w, "gru", prefix="t_")
    h, _, pool_cache = layers.attention_pool_forward(hidden, batch["step_mask"], w["t_att_W"], w["t_att_b"],
                                                     w["t_att_v"])
    B, J = batch["note_mask"].shape
    E = np.asarray(batch["averaging"] @ w["emb"]).reshape(B, J, -1)
    fused, _, _, att_cache = attention_forward(h, E, batch["note_mask"], w)
    static_code = batch["static"] @ w["W_s"] + w["b_s"]
    present = batch["present"][:, None]
    vision_code = present * (batch["image"] @ w["W_i"] + w["b_i"])
    combined = np.concatenate([fused, static_code, vision_code, 1.0 - present], axis=1)
    logits = combined @ w["W_o"] + w["b_o"]
    return logits, (rnn_cache, pool_cache, att_cache, combined, hidden)


def loss_and_grad(w, batch, Y, with_grad=True):
    logits, (rnn_cache, pool_cache, att_cache, combined, hidden) = forward(w, batch)
    loss, d_logits = layers.softmax_cross_entropy(logits, Y)
    if not with_grad:
        return loss, None

    grads = {"W_o": combined.T @ d_logits, "b_o": d_logits.sum(axis=0)}
    d_combined = d_logits @ w["W_o"].T
    H2 = w["b_g"].shape[0]
    S = w["b_s"].shape[0]
    V = w["b_i"].shape[0]
    d_fused = d_combined[:, :H2]
    d_static = d_combined[:, H2:H2 + S]
    d_vision = d_combined[:, H2 + S:H2 + S + V] * batch["present"][:, None]
    grads["W_s"] = batch["static"].T @ d_static
    grads["b_s"] = d_static.sum(axis=0)
    grads["W_i"] = batch["image"].T @ d_vision
    grads["b_i"] = d_vision.sum(axis=0)

    dh, dE, att_grads = attention_backward(d_fused, att_cache, w)
    grads.update(att_grads)
    grads["emb"] = np.asarray(batch["averaging"].T @ dE.reshape(-1, dE.shape[2]))

    d_hidden, pool_grads = layers.attention_pool_backward(dh, pool_cache, w["t_att_W"], w["t_att_v"])
    grads.update({"t_att_" + k: v for k, v in pool_grads.items()})
    _, rnn_grads = layers.bidirectional_backward(d_hidden, rnn_cache, w, "gru", prefix="t_")
    grads.update(rnn_grads)
    return loss, grads


def predict_encoded(model, encoded, index):
    batch = _batch(encoded, index, model.params.hash_dim)
    logits, _ = forward(model.weights, batch)
    return layers.softmax(logits)


def fusionformer_predict(model, records, chunk=256):
    encoded = encode_records(records, model.preprocessing, model.cardinalities, model.params)
    parts = [predict_encoded(model, encoded, np.arange(start, min(start + chunk, len(records))))
             for start in range(0, len(records), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, model.n_classes))


def fusionformer_forward(record, model):
    return fusionformer_predict(model, [record])[0]


def _auc(probs, y):
    try:
        if probs.shape[1] == 2:
            return roc_auc(probs[:, 1], y)
        return macro_ovr_auc(probs, y)
    except MetricError:
        return float("nan")


# Train logic
def train_fusionformer(cohort, params, task, splits=None):
    """Train end to end with early stopping on validation AUC; returns (model, curves)."""
    n_classes = len(task_classes(task))
    if splits is None:
        train, val, _ = split_cohort(cohort, (0.8, 0.1, 0.1), task, params.seed)
    else:
        train, val = splits
    y_train = train.labels(task)
    y_val = val.labels(task)
    if len(np.unique(y_train)) < 2:
        raise ModelError(f"{task} training labels contain a single class")

    records = list(train) + list(val)
    preprocessing = fit_preprocessing(list(train))
    cardinalities = tuple(c.cardinality for c in cohort.schema.categorical_features)
    encoded = encode_records(records, preprocessing, cardinalities, params)
    Y = layers.one_hot(np.concatenate([y_train, y_val]), n_classes)
    train_index = np.arange(len(train))
    val_index = np.arange(len(train), len(records))

    rng = np.random.default_rng(params.seed)
    weights = init_weights(params, encoded.X.shape[2], encoded.static.shape[1], encoded.image.shape[1],
                           n_classes, rng)
    model = FusionFormerModel(params, n_classes, weights, preprocessing, cardinalities,
                              class_prior(y_train, n_classes))

    def objective(w, index, with_grad):
        return loss_and_grad(w, _batch(encoded, index, params.hash_dim), Y[index], with_grad)

    def score(w):
        model.weights = w
        train_auc = _auc(predict_encoded(model, encoded, train_index), y_train)
        val_auc = _auc(predict_encoded(model, encoded, val_index), y_val) if len(val_index) else train_auc
        return {"train_auc": train_auc, "val_auc": val_auc,
                "val_score": val_auc if np.isfinite(val_auc) else -np.inf}

    best, log = gradient_descent(weights, objective, train_index, val_index, params.optimizer, params.seed,
                                 score=score)
    model.weights = best
    curves = TrainingCurves([{key: entry[key] for key in CURVE_COLUMNS} for entry in log])
    logger.info("fusion network stopped after %d epochs (best epoch %d)", len(log), curves.best_epoch)
    return model, curves


# Persistence

def save_fusionformer(model, path):
    payload = {
        "format_version": FORMAT_VERSION,
        "params": model.params.to_dict(),
        "n_classes": model.n_classes,
        "cardinalities": list(model.cardinalities),
        "prior": model.prior.tolist(),
        "preprocessing": {k: np.asarray(v).tolist() for k, v in sorted(model.preprocessing.items())},
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(model.weights.items())},
    }
    try:
        Path(path).write_text(json.dumps(payload, allow_nan=False), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write fusion model {path}: {exc}") from exc


def load_fusionformer(path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported fusion model format_version {payload.get('format_version')!r}")
    return FusionFormerModel(
        params=FusionFormerParams.from_dict(payload["params"]),
        n_classes=int(payload["n_classes"]),
        weights={k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in payload["weights"].items()},
        preprocessing={k: np.asarray(v, dtype=np.float64) for k, v in payload["preprocessing"].items()},
        cardinalities=tuple(payload["cardinalities"]),
        prior=np.asarray(payload["prior"], dtype=np.float64),
    )
