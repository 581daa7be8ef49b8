"""Reader expert: hashed uni/bigram counts into an L2-penalised multinomial logistic model."""
from dataclasses import asdict, dataclass
import logging

import numpy as np
from scipy import optimize, sparse, special

from sepsis_fusion.errors import ModelError
from sepsis_fusion.experts import layers
from sepsis_fusion.experts.base import ExpertKind, ExpertModel, check_labels, class_prior, is_degenerate, prior_only
from sepsis_fusion.utils.hashing import hashed_ngrams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TextExpertParams:
    orders: tuple = (1, 2)
    hash_dim: int = 2 ** 15
    l2: float = 1e-3
    max_iter: int = 500
    tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(int(o) for o in self.orders))
        if self.hash_dim < 1 or self.hash_dim & (self.hash_dim - 1):
            raise ModelError(f"hash_dim must be a power of two, got {self.hash_dim}")
        if self.l2 < 0:
            raise ModelError("l2 penalty must be >= 0")
        if not self.orders or min(self.orders) < 1:
            raise ModelError("n-gram orders must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return cls(**payload)


def featurize(documents, params):
    """Sparse (n, hash_dim) n-gram counts; n-grams never span two notes."""
    rows, cols = [], []
    for i, notes in enumerate(documents):
        for note in notes:
            ids = hashed_ngrams(note.tokens, params.hash_dim, params.orders)
            rows.extend([i] * len(ids))
            cols.extend(ids)
    data = np.ones(len(cols))
    counts = sparse.coo_matrix((data, (rows, cols)), shape=(len(documents), params.hash_dim))
    return counts.tocsr()


def loss_and_grad(W, X, Y, intercept, l2):
    """Mean cross-entropy plus (l2/2)|W|^2 for logits X W + intercept."""
    logits = X @ W + intercept
    loss, d_logits = layers.softmax_cross_entropy(logits, Y)
    loss += 0.5 * l2 * float(np.sum(W * W))
    grad = np.asarray(X.T @ d_logits) + l2 * W
    return loss, grad


# Fit text logic
def fit_text(documents, y, params, n_classes=None):
    if not len(documents):
        raise ModelError("fit_text needs at least one document")
    n_classes = n_classes or max(2, int(np.max(y)) + 1)
    y = check_labels(y, n_classes)
    if is_degenerate(y):
        return prior_only(ExpertKind.READER, params, y, n_classes)

    X = featurize(documents, params)
    Y = layers.one_hot(y, n_classes)
    prior = class_prior(y, n_classes)
    intercept = np.log(prior)
    shape = (params.hash_dim, n_classes)

    def objective(flat):
        loss, grad = loss_and_grad(flat.reshape(shape), X, Y, intercept, params.l2)
        return loss, grad.ravel()

    result = optimize.minimize(
        objective, np.zeros(np.prod(shape)), jac=True, method="L-BFGS-B",
        options={"maxiter": params.max_iter, "gtol": params.tolerance},
    )
    if not result.success:
        logger.info("reader optimiser stopped early: %s", result.message)
    W = result.x.reshape(shape)
    log = [{"iterations": int(result.nit), "loss": float(result.fun),
            "grad_norm": float(np.linalg.norm(result.jac))}]
    return ExpertModel(ExpertKind.READER, params, n_classes, prior, {"W": W}, training_log=log)


def predict_text(model, documents):
    if model.is_prior_only:
        return np.tile(model.prior, (len(documents), 1))
    X = featurize(documents, model.params)
    return special.softmax(X @ model.weights["W"] + np.log(model.prior), axis=1)
