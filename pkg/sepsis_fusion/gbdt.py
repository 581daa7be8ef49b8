"""Gradient-boosted decision trees with exact greedy splits and Newton leaves.

Binary problems carry a single score sequence for the positive class. Problems with more
classes fit one logistic sequence per class (one-vs-rest) and normalise the per-class
sigmoids onto the simplex.
"""
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
import logging
import json

import numpy as np
from scipy import special

from sepsis_fusion.errors import ModelError, SchemaError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BASE_SCORE_CLIP = 10.0
EXHAUSTIVE_CATEGORY_LIMIT = 8


@dataclass(frozen=True)
class GBDTParams:
    rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 1
    l2: float = 1.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ModelError("rounds, max_depth and min_samples_leaf must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ModelError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if not self.l2 > 0:
            raise ModelError(f"l2 must be > 0, got {self.l2}")
        if not 0.0 < self.subsample <= 1.0:
            raise ModelError(f"subsample must lie in (0, 1], got {self.subsample}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    categorical: tuple = ()  # (feature index, cardinality) pairs

    @classmethod
    def numeric(cls, n_features):
        return cls(tuple(f"f{j}" for j in range(n_features)))

    @property
    def n_features(self):
        return len(self.names)

    def is_categorical(self, feature):
        return any(index == feature for index, _ in self.categorical)

    def to_dict(self):
        return {"names": list(self.names), "categorical": [list(pair) for pair in self.categorical]}

    @classmethod
    def from_dict(cls, payload):
        return cls(tuple(payload["names"]), tuple(tuple(pair) for pair in payload.get("categorical", [])))


@dataclass(frozen=True)
class Split:
    feature: int
    gain: float
    threshold: float | None = None
    categories: tuple | None = None
    default_left: bool = True


@dataclass
class TreeNode:
    value: float = 0.0
    feature: int | None = None
    threshold: float | None = None
    categories: tuple | None = None
    default_left: bool = True
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    gain: float = 0.0
    cover: float = 0.0

    @property
    def is_leaf(self):
        return self.feature is None

    def goes_left(self, column):
        column = np.asarray(column, dtype=np.float64)
        if self.categories is not None:
            left = np.isin(column, np.asarray(self.categories, dtype=np.float64))
        else:
            left = column < self.threshold
        return np.where(np.isnan(column), self.default_left, left)

    def predict(self, X):
        out = np.empty(X.shape[0])
        self._fill(X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, X, rows, out):
        if self.is_leaf:
            out[rows] = self.value
            return
        left = self.goes_left(X[rows, self.feature])
        self.left._fill(X, rows[left], out)
        self.right._fill(X, rows[~left], out)

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def splits(self):
        if not self.is_leaf:
            yield self
            yield from self.left.splits()
            yield from self.right.splits()

    def depth(self):
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self):
        if self.is_leaf:
            return {"leaf": self.value, "cover": self.cover}
        payload = {
            "feature": self.feature,
            "default_left": self.default_left,
            "gain": self.gain,
            "cover": self.cover,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }
        if self.categories is not None:
            payload["categories"] = list(self.categories)
        else:
            payload["threshold"] = self.threshold
        return payload

    @classmethod
    def from_dict(cls, payload):
        if "leaf" in payload:
            return cls(value=float(payload["leaf"]), cover=float(payload.get("cover", 0.0)))
        categories = payload.get("categories")
        return cls(
            feature=int(payload["feature"]),
            threshold=payload.get("threshold"),
            categories=None if categories is None else tuple(int(c) for c in categories),
            default_left=bool(payload["default_left"]),
            left=cls.from_dict(payload["left"]),
            right=cls.from_dict(payload["right"]),
            gain=float(payload.get("gain", 0.0)),
            cover=float(payload.get("cover", 0.0)),
        )


@dataclass
class GBDTModel:
    params: GBDTParams
    schema: FeatureSchema
    n_classes: int
    base_scores: np.ndarray
    trees: list
    learning_rate: float
    training_log: list = field(default_factory=list)

    @property
    def loss(self):
        return "logistic" if self.n_classes == 2 else "ovr_logistic"

    @property
    def rounds(self):
        return len(self.trees[0]) if self.trees else 0

    @property
    def is_prior_only(self):
        return self.rounds == 0

    def decision_function(self, X):
        X = _as_matrix(X)
        if X.shape[1] != self.schema.n_features:
            raise SchemaError(f"expected {self.schema.n_features} features, got {X.shape[1]}")
        scores = np.empty((X.shape[0], len(self.base_scores)))
        for s, sequence in enumerate(self.trees or [[] for _ in self.base_scores]):
            total = np.zeros(X.shape[0])
            for tree in sequence:
                total += tree.predict(X)
            scores[:, s] = self.base_scores[s] + self.learning_rate * total
        return scores

    def predict_proba(self, X):
        scores = self.decision_function(X)
        if self.n_classes == 2:
            positive = special.expit(scores[:, 0])
            return np.column_stack([1.0 - positive, positive])
        per_class = special.expit(scores)
        return per_class / per_class.sum(axis=1, keepdims=True)


def _as_matrix(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def _newton_score(G, H, l2):
    return G * G / (H + l2)


def _numeric_split(x, g, h, params, feature):
    missing = np.isnan(x)
    present = ~missing
    order = np.argsort(x[present], kind="mergesort")
    xs = x[present][order]
    if len(xs) < 2:
        return None
    gs, hs = g[present][order], h[present][order]
    G, H, n = g.sum(), h.sum(), len(x)
    G_miss, H_miss, n_miss = g[missing].sum(), h[missing].sum(), int(missing.sum())
    parent = _newton_score(G, H, params.l2)

    prefix_g = np.cumsum(gs)[:-1]
    prefix_h = np.cumsum(hs)[:-1]
    prefix_n = np.arange(1, len(xs))
    distinct = xs[:-1] != xs[1:]

    best = None
    directions = (False, True) if n_miss else (False,)
    for missing_left in directions:
        G_left = prefix_g + (G_miss if missing_left else 0.0)
        H_left = prefix_h + (H_miss if missing_left else 0.0)
        n_left = prefix_n + (n_miss if missing_left else 0)
        gain = (_newton_score(G_left, H_left, params.l2)
                + _newton_score(G - G_left, H - H_left, params.l2) - parent)
        valid = distinct & (n_left >= params.min_samples_leaf) & (n - n_left >= params.min_samples_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if best is None or gain[i] > best[0]:
            if n_miss:
                default_left = missing_left
            else:
                default_left = bool(H_left[i] >= H - H_left[i])
            best = (float(gain[i]), i, default_left)

    if best is None or not best[0] > 0:
        return None
    gain, i, default_left = best
    threshold = 0.5 * (xs[i] + xs[i + 1])
    if not xs[i] < threshold:
        threshold = xs[i + 1]
    return Split(feature, gain, threshold=float(threshold), default_left=default_left)


def _category_subsets(categories, G_cat, H_cat, l2):
    if len(categories) <= EXHAUSTIVE_CATEGORY_LIMIT:
        for size in range(1, len(categories)):
            for chosen in combinations(range(len(categories)), size):
                yield np.array(chosen)
    else:
        order = np.argsort(G_cat / (H_cat + l2), kind="mergesort")
        for size in range(1, len(categories)):
            yield np.sort(order[:size])


def _categorical_split(x, g, h, params, feature):
    missing = np.isnan(x)
    codes = x[~missing].astype(np.int64)
    categories, inverse = np.unique(codes, return_inverse=True)
    if len(categories) < 2:
        return None
    G_cat = np.bincount(inverse, weights=g[~missing], minlength=len(categories))
    H_cat = np.bincount(inverse, weights=h[~missing], minlength=len(categories))
    n_cat = np.bincount(inverse, minlength=len(categories))
    G, H, n = g.sum(), h.sum(), len(x)
    G_miss, H_miss, n_miss = g[missing].sum(), h[missing].sum(), int(missing.sum())
    parent = _newton_score(G, H, params.l2)

    best = None
    for chosen in _category_subsets(categories, G_cat, H_cat, params.l2):
        for missing_left in ((False, True) if n_miss else (False,)):
            G_left = G_cat[chosen].sum() + (G_miss if missing_left else 0.0)
            H_left = H_cat[chosen].sum() + (H_miss if missing_left else 0.0)
            n_left = int(n_cat[chosen].sum()) + (n_miss if missing_left else 0)
            if min(n_left, n - n_left) < params.min_samples_leaf:
                continue
            gain = (_newton_score(G_left, H_left, params.l2)
                    + _newton_score(G - G_left, H - H_left, params.l2) - parent)
            if best is None or gain > best[0]:
                default_left = missing_left if n_miss else bool(H_left >= H - H_left)
                best = (float(gain), tuple(int(c) for c in categories[chosen]), default_left)

    if best is None or not best[0] > 0:
        return None
    return Split(feature, best[0], categories=best[1], default_left=best[2])


def exact_best_split(feature_values, gradients, hessians, params, *, feature=0, categorical=False):
    """Best gain split of one column, or None when no split has positive gain."""
    x = np.asarray(feature_values, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    if not x.shape == g.shape == h.shape or x.ndim != 1:
        raise ModelError("feature values, gradients and hessians must be equal-length columns")
    if len(x) == 0:
        raise ModelError("empty column")
    if (h < 0).any():
        raise ModelError("hessians must be non-negative")
    if categorical:
        return _categorical_split(x, g, h, params, feature)
    return _numeric_split(x, g, h, params, feature)


def _grow(X, g, h, depth, params, schema):
    G, H = g.sum(), h.sum()
    node = TreeNode(value=float(-G / (H + params.l2)), cover=float(H))
    if depth >= params.max_depth or len(g) < 2 * params.min_samples_leaf:
        return node

    best = None
    for j in range(X.shape[1]):
        split = exact_best_split(X[:, j], g, h, params, feature=j, categorical=schema.is_categorical(j))
        if split is not None and (best is None or split.gain > best.gain):
            best = split
    if best is None:
        return node

    node.feature = best.feature
    node.threshold = best.threshold
    node.categories = best.categories
    node.default_left = best.default_left
    node.gain = best.gain
    left = node.goes_left(X[:, best.feature])
    node.left = _grow(X[left], g[left], h[left], depth + 1, params, schema)
    node.right = _grow(X[~left], g[~left], h[~left], depth + 1, params, schema)
    return node


def class_targets(y, n_classes):
    if n_classes == 2:
        return (y == 1).astype(np.float64)[:, None]
    return np.eye(n_classes)[y]


def base_scores_from_prior(prior):
    with np.errstate(divide="ignore"):
        logits = special.logit(np.asarray(prior, dtype=np.float64))
    logits = np.clip(logits, -BASE_SCORE_CLIP, BASE_SCORE_CLIP)
    return logits[1:2] if len(prior) == 2 else logits


def ovr_logistic_loss(scores, targets):
    return float(np.mean(np.sum(np.logaddexp(0.0, scores) - targets * scores, axis=1)))


# Fit logic
def fit_gbdt(X, y, params, *, n_classes=None, schema=None):
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ModelError("cannot fit a GBDT on empty data")
    if len(y) != X.shape[0]:
        raise ModelError(f"X has {X.shape[0]} rows but y has {len(y)} labels")
    if (y < 0).any():
        raise ModelError("class labels must be non-negative integers")
    n_classes = int(n_classes or max(2, int(y.max()) + 1))
    if y.max() >= n_classes:
        raise ModelError(f"label {int(y.max())} outside {n_classes} classes")
    schema = schema or FeatureSchema.numeric(X.shape[1])
    if schema.n_features != X.shape[1]:
        raise SchemaError("feature schema width differs from X")

    n = X.shape[0]
    prior = np.bincount(y, minlength=n_classes) / n
    base = base_scores_from_prior(prior)
    model = GBDTModel(params, schema, n_classes, base, [], params.learning_rate)
    if np.count_nonzero(prior) < 2:
        logger.debug("single-class data; returning prior-only model")
        return model

    targets = class_targets(y, n_classes)
    n_sequences = targets.shape[1]
    model.trees = [[] for _ in range(n_sequences)]
    totals = np.zeros((n, n_sequences))
    rng = np.random.default_rng(params.seed)
    sample_size = max(1, int(round(params.subsample * n)))

    for round_index in range(params.rounds):
        if params.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=sample_size, replace=False))
        else:
            rows = np.arange(n)
        for s in range(n_sequences):
            p = special.expit(base[s] + params.learning_rate * totals[:, s])
            g = p - targets[:, s]
            h = p * (1.0 - p)
            tree = _grow(X[rows], g[rows], h[rows], 0, params, schema)
            model.trees[s].append(tree)
            totals[:, s] += tree.predict(X)
        loss = ovr_logistic_loss(base + params.learning_rate * totals, targets)
        model.training_log.append(loss)
        logger.debug("round %d train loss %.6f", round_index + 1, loss)

    return model


# Predict logic
def gbdt_predict(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise SchemaError("gbdt_predict expects a single feature row")
    return model.predict_proba(x[None, :])[0]


def gbdt_predict_proba(model, X):
    return model.predict_proba(X)


def gbdt_gain_importance(model):
    totals = {}
    for sequence in model.trees:
        for tree in sequence:
            for node in tree.splits():
                totals[node.feature] = totals.get(node.feature, 0.0) + node.gain
    grand = sum(totals.values())
    if not grand > 0:
        return {}
    return {feature: totals[feature] / grand for feature in sorted(totals)}


def model_to_dict(model):
    return {
        "format_version": FORMAT_VERSION,
        "params": model.params.to_dict(),
        "schema": model.schema.to_dict(),
        "n_classes": model.n_classes,
        "learning_rate": model.learning_rate,
        "base_scores": model.base_scores.tolist(),
        "trees": [[tree.to_dict() for tree in sequence] for sequence in model.trees],
        "training_log": list(model.training_log),
    }


def model_from_dict(payload):
    if payload.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported GBDT format_version {payload.get('format_version')!r}")
    return GBDTModel(
        params=GBDTParams.from_dict(payload["params"]),
        schema=FeatureSchema.from_dict(payload["schema"]),
        n_classes=int(payload["n_classes"]),
        base_scores=np.asarray(payload["base_scores"], dtype=np.float64),
        trees=[[TreeNode.from_dict(t) for t in sequence] for sequence in payload["trees"]],
        learning_rate=float(payload["learning_rate"]),
        training_log=list(payload.get("training_log", [])),
    )


def save_gbdt(model, path):
    Path(path).write_text(json.dumps(model_to_dict(model), allow_nan=False), encoding="utf-8")


def load_gbdt(path):
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
