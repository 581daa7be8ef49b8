"""Forward/backward building blocks in numpy.

Every forward returns (output, cache) and the matching backward takes the upstream
gradient plus that cache. Arrays are batch-major: (batch, time, features).
"""
import numpy as np
from scipy import special


def init_uniform(rng, shape, fan_in):
    scale = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-scale, scale, size=shape)


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to mask; fully masked rows give zeros."""
    masked = np.where(mask, scores, -np.inf)
    top = np.max(masked, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    weights = np.where(mask, np.exp(masked - top), 0.0)
    total = weights.sum(axis=-1, keepdims=True)
    return weights / np.where(total > 0, total, 1.0)


def softmax_backward(d_weights, weights):
    return weights * (d_weights - np.sum(weights * d_weights, axis=-1, keepdims=True))


# Causal convolution

def causal_conv_forward(X, W, b, width):
    """tanh(conv1d) where step t sees inputs t-width+1 .. t, zero padded on the left."""
    B, T, F = X.shape
    padded = np.concatenate([np.zeros((B, width - 1, F)), X], axis=1)
    stacked = np.concatenate([padded[:, k:k + T, :] for k in range(width)], axis=2)
    A = np.tanh(stacked @ W + b)
    return A, (stacked, A)


def causal_conv_backward(dA, cache):
    stacked, A = cache
    dZ = dA * (1.0 - A * A)
    return {
        "W": np.einsum("btk,btc->kc", stacked, dZ),
        "b": dZ.sum(axis=(0, 1)),
    }


# Recurrent cells. State is carried unchanged through steps whose mask is 0.

def gru_forward(X, step_mask, W, U, b, reverse=False):
    B, T, _ = X.shape
    H = U.shape[0]
    projected = X @ W + b
    h = np.zeros((B, H))
    out = np.zeros((B, T, H))
    caches = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        m = step_mask[:, t, None]
        recurrent = h @ U[:, :2 * H]
        z = special.expit(projected[:, t, :H] + recurrent[:, :H])
        r = special.expit(projected[:, t, H:2 * H] + recurrent[:, H:])
        q = r * h
        n = np.tanh(projected[:, t, 2 * H:] + q @ U[:, 2 * H:])
        candidate = (1.0 - z) * n + z * h
        caches[t] = (h, z, r, q, n, m)
        h = m * candidate + (1.0 - m) * h
        out[:, t] = h
    return out, (X, caches, reverse)


def gru_backward(d_out, cache, W, U):
    X, caches, reverse = cache
    B, T, _ = X.shape
    H = U.shape[0]
    dU = np.zeros_like(U)
    d_projected = np.zeros((B, T, 3 * H))
    dh = np.zeros((B, H))
    for t in (range(T) if reverse else range(T - 1, -1, -1)):
        h_prev, z, r, q, n, m = caches[t]
        dh = dh + d_out[:, t]
        d_candidate = m * dh
        dh_prev = (1.0 - m) * dh + d_candidate * z
        dz = d_candidate * (h_prev - n)
        da_n = d_candidate * (1.0 - z) * (1.0 - n * n)
        dq = da_n @ U[:, 2 * H:].T
        dU[:, 2 * H:] += q.T @ da_n
        dh_prev += dq * r
        da_zr = np.concatenate([dz * z * (1.0 - z), dq * h_prev * r * (1.0 - r)], axis=1)
        dU[:, :2 * H] += h_prev.T @ da_zr
        dh_prev += da_zr @ U[:, :2 * H].T
        d_projected[:, t] = np.concatenate([da_zr, da_n], axis=1)
        dh = dh_prev
    grads = {
        "W": np.einsum("btc,btg->cg", X, d_projected),
        "U": dU,
        "b": d_projected.sum(axis=(0, 1)),
    }
    return d_projected @ W.T, grads


def lstm_forward(X, step_mask, W, U, b, reverse=False):
    B, T, _ = X.shape
    H = U.shape[0]
    projected = X @ W + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    caches = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        m = step_mask[:, t, None]
        a = projected[:, t] + h @ U
        i = special.expit(a[:, :H])
        f = special.expit(a[:, H:2 * H])
        o = special.expit(a[:, 2 * H:3 * H])
        g = np.tanh(a[:, 3 * H:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        caches[t] = (h, c, i, f, o, g, tanh_c, m)
        h = m * (o * tanh_c) + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        out[:, t] = h
    return out, (X, caches, reverse)


def lstm_backward(d_out, cache, W, U):
    X, caches, reverse = cache
    B, T, _ = X.shape
    H = U.shape[0]
    dU = np.zeros_like(U)
    d_projected = np.zeros((B, T, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in (range(T) if reverse else range(T - 1, -1, -1)):
        h_prev, c_prev, i, f, o, g, tanh_c, m = caches[t]
        dh = dh + d_out[:, t]
        d_hidden = m * dh
        d_cell = m * dc + d_hidden * o * (1.0 - tanh_c * tanh_c)
        da = np.concatenate([
            d_cell * g * i * (1.0 - i),
            d_cell * c_prev * f * (1.0 - f),
            d_hidden * tanh_c * o * (1.0 - o),
            d_cell * i * (1.0 - g * g),
        ], axis=1)
        dU += h_prev.T @ da
        dh = (1.0 - m) * dh + da @ U.T
        dc = (1.0 - m) * dc + d_cell * f
        d_projected[:, t] = da
    grads = {
        "W": np.einsum("btc,btg->cg", X, d_projected),
        "U": dU,
        "b": d_projected.sum(axis=(0, 1)),
    }
    return d_projected @ W.T, grads


CELLS = {
    "gru": (gru_forward, gru_backward, 3),
    "lstm": (lstm_forward, lstm_backward, 4),
}


def bidirectional_forward(X, step_mask, weights, cell, prefix=""):
    forward, _, _ = CELLS[cell]
    out_f, cache_f = forward(X, step_mask, weights[prefix + "fwd_W"], weights[prefix + "fwd_U"],
                             weights[prefix + "fwd_b"])
    out_b, cache_b = forward(X, step_mask, weights[prefix + "bwd_W"], weights[prefix + "bwd_U"],
                             weights[prefix + "bwd_b"], reverse=True)
    return np.concatenate([out_f, out_b], axis=2), (cache_f, cache_b)


def bidirectional_backward(d_out, cache, weights, cell, prefix=""):
    _, backward, _ = CELLS[cell]
    cache_f, cache_b = cache
    H = weights[prefix + "fwd_U"].shape[0]
    dX_f, grads_f = backward(d_out[:, :, :H], cache_f, weights[prefix + "fwd_W"], weights[prefix + "fwd_U"])
    dX_b, grads_b = backward(d_out[:, :, H:], cache_b, weights[prefix + "bwd_W"], weights[prefix + "bwd_U"])
    grads = {prefix + "fwd_" + k: v for k, v in grads_f.items()}
    grads.update({prefix + "bwd_" + k: v for k, v in grads_b.items()})
    return dX_f + dX_b, grads


def init_bidirectional(rng, n_inputs, hidden, cell, prefix=""):
    gates = CELLS[cell][2]
    weights = {}
    for direction in ("fwd_", "bwd_"):
        weights[prefix + direction + "W"] = init_uniform(rng, (n_inputs, gates * hidden), hidden)
        weights[prefix + direction + "U"] = init_uniform(rng, (hidden, gates * hidden), hidden)
        weights[prefix + direction + "b"] = np.zeros(gates * hidden)
    return weights


# Attention pooling over time

def attention_pool_forward(H, step_mask, Wa, ba, v):
    """Additive scores v . tanh(H Wa + ba), softmax over valid steps, weighted sum of H."""
    U = np.tanh(H @ Wa + ba)
    scores = U @ v
    alpha = masked_softmax(scores, step_mask)
    pooled = np.einsum("bt,btd->bd", alpha, H)
    return pooled, alpha, (H, U, alpha)


def attention_pool_backward(d_pooled, cache, Wa, v):
    H, U, alpha = cache
    dH = alpha[:, :, None] * d_pooled[:, None, :]
    d_scores = softmax_backward(np.einsum("btd,bd->bt", H, d_pooled), alpha)
    d_pre = d_scores[:, :, None] * v * (1.0 - U * U)
    dH += d_pre @ Wa.T
    grads = {
        "W": np.einsum("btd,bta->da", H, d_pre),
        "b": d_pre.sum(axis=(0, 1)),
        "v": np.einsum("bt,bta->a", d_scores, U),
    }
    return dH, grads


# Output layer

def softmax_cross_entropy(logits, Y):
    """Mean cross-entropy over the batch and its gradient with respect to the logits."""
    log_probs = logits - special.logsumexp(logits, axis=1, keepdims=True)
    loss = -float(np.sum(Y * log_probs)) / logits.shape[0]
    return loss, (np.exp(log_probs) - Y) / logits.shape[0]


def softmax(logits):
    return special.softmax(logits, axis=-1)


def one_hot(y, n_classes):
    return np.eye(n_classes)[np.asarray(y, dtype=np.int64)]
