import numpy as np


def relative_error(analytic, numeric, floor=1e-6):
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def check_gradients(loss_and_grad, weights, *, epsilon=1e-5, per_array=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    loss_and_grad(weights) -> (loss, grads). With per_array set, only that many random
    coordinates of each parameter array are probed. Weights are restored afterwards.
    """
    _, analytic = loss_and_grad(weights)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(weights):
        values = weights[name]
        flat = values.reshape(-1)
        coords = np.arange(flat.size)
        if per_array is not None and flat.size > per_array:
            coords = np.sort(rng.choice(flat.size, size=per_array, replace=False))
        for i in coords:
            original = flat[i]
            flat[i] = original + epsilon
            upper, _ = loss_and_grad(weights)
            flat[i] = original - epsilon
            lower, _ = loss_and_grad(weights)
            flat[i] = original
            numeric = (upper - lower) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
    return worst
