"""Mini-batch gradient descent with early stopping, shared by the network experts."""
import logging

import numpy as np

logger = logging.getLogger(__name__)


def validation_split(n, fraction, seed):
    """(train, validation) index arrays; the validation part is empty when it would round to 0."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fraction * n))
    if n_val == 0 or n - n_val < 1:
        return np.sort(order), np.array([], dtype=np.int64)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def copy_weights(weights):
    return {name: value.copy() for name, value in weights.items()}


def gradient_descent(weights, objective, train_index, val_index, settings, seed, *, score=None):
    """Fixed-step mini-batch descent.

    objective(weights, index, with_grad) returns (loss, grads). Early stopping watches the
    validation loss, or score(weights) when given (higher is better), and gives up after
    more than settings.patience epochs without improvement. The best epoch's weights are
    returned with the per-epoch log.
    """
    rng = np.random.default_rng(seed)
    best_weights = copy_weights(weights)
    best = -np.inf
    stale = 0
    log = []
    watch = val_index if len(val_index) else train_index

    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(train_index)
        for start in range(0, len(order), settings.batch_size):
            batch = np.sort(order[start:start + settings.batch_size])
            _, grads = objective(weights, batch, True)
            for name, grad in grads.items():
                weights[name] -= settings.step_size * grad

        train_loss, _ = objective(weights, train_index, False)
        val_loss, _ = objective(weights, watch, False)
        entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        current = -val_loss
        if score is not None:
            entry.update(score(weights))
            current = entry["val_score"]
        log.append(entry)
        logger.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)

        if not np.isfinite(train_loss):
            logger.warning("non-finite training loss at epoch %d; keeping best weights", epoch)
            break
        if current > best:
            best = current
            best_weights = copy_weights(weights)
            stale = 0
        else:
            stale += 1
            if stale > settings.patience:
                break

    return best_weights, log
