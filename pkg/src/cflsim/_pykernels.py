"""NumPy implementation of the training kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``CFLSIM_PURE_PYTHON=1``. Signatures mirror the extension exactly.

Integer codes: arch 0=logistic, 1=mlp; act 0=relu, 1=tanh;
loss 0=cross-entropy, 1=focal; opt 0=sgd, 1=adam.
"""

from __future__ import annotations

import math

import numpy as np

P_MIN = 1e-12
P_MAX = 1.0 - 1e-12


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _loss_dlogit(z, y, loss_kind, alpha, gamma):
    """Per-sample loss and d(loss)/d(logit).

    p_t and 1 - p_t are both taken from the logit (sigmoid of +z and -z,
    sign-flipped for negatives) so neither suffers cancellation; each is
    clamped to [P_MIN, P_MAX].
    """
    pos = y > 0.5
    sign = np.where(pos, 1.0, -1.0)
    pt = np.clip(_sigmoid(sign * z), P_MIN, P_MAX)
    qt = np.clip(_sigmoid(-sign * z), P_MIN, P_MAX)
    logpt = np.log(pt)
    if loss_kind == 0:
        return -logpt, sign * -qt
    at = np.where(pos, alpha, 1.0 - alpha)
    mod = qt**gamma
    loss = -at * mod * logpt
    dz = sign * at * mod * (gamma * pt * logpt - qt)
    return loss, dz


def _forward_logits(arch, act, hidden, params, X):
    d = X.shape[1]
    if arch == 0:
        return X @ params[:d] + params[d], None, None
    W1 = params[: d * hidden].reshape(d, hidden)
    b1 = params[d * hidden : d * hidden + hidden]
    w2 = params[d * hidden + hidden : d * hidden + 2 * hidden]
    b2 = params[d * hidden + 2 * hidden]
    a = X @ W1 + b1
    h = np.maximum(a, 0.0) if act == 0 else np.tanh(a)
    return h @ w2 + b2, a, h


def predict_proba(arch, act, hidden, params, X):
    z, _, _ = _forward_logits(arch, act, hidden, np.asarray(params, dtype=np.float64), X)
    return np.clip(_sigmoid(z), P_MIN, P_MAX)


def sample_losses(arch, act, hidden, loss_kind, alpha, gamma, params, X, y):
    z, _, _ = _forward_logits(arch, act, hidden, np.asarray(params, dtype=np.float64), X)
    loss, _ = _loss_dlogit(z, np.asarray(y, dtype=np.float64), loss_kind, alpha, gamma)
    return loss


def loss_grad(arch, act, hidden, loss_kind, alpha, gamma, params, X, y):
    """Mean loss over the batch and its gradient w.r.t. ``params``."""
    params = np.asarray(params, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    z, a, h = _forward_logits(arch, act, hidden, params, X)
    loss, dz = _loss_dlogit(z, y, loss_kind, alpha, gamma)
    dz = dz / n
    grad = np.empty_like(params)
    if arch == 0:
        grad[:d] = X.T @ dz
        grad[d] = dz.sum()
    else:
        w2 = params[d * hidden + hidden : d * hidden + 2 * hidden]
        grad[d * hidden + hidden : d * hidden + 2 * hidden] = h.T @ dz
        grad[d * hidden + 2 * hidden] = dz.sum()
        dh = np.outer(dz, w2)
        da = dh * (a > 0.0) if act == 0 else dh * (1.0 - h * h)
        grad[: d * hidden] = (X.T @ da).reshape(-1)
        grad[d * hidden : d * hidden + hidden] = da.sum(axis=0)
    return float(loss.mean()), grad


def adam_update(params, grad, m, v, step, lr, beta1, beta2, eps):
    """In-place Adam step; ``step`` is the 1-based step count after increment."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    params -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_local(
    arch, act, hidden, loss_kind, alpha, gamma,
    opt_kind, lr, beta1, beta2, eps,
    params, X, y, order, batch_size, noise,
):
    """Run ``order.shape[0]`` epochs of mini-batch training.

    ``order[e]`` is the sample permutation for epoch ``e``; ``noise`` is
    either None or an array shaped like ``order`` plus a feature axis, added
    to the features of each visited sample. Returns
    ``(params, batch_losses, bad_step)`` with ``bad_step == -1`` on success,
    otherwise the index of the first step whose loss was non-finite.
    """
    w = np.array(params, dtype=np.float64, copy=True)
    epochs, n = order.shape
    steps_per_epoch = -(-n // batch_size)
    losses = np.zeros(epochs * steps_per_epoch, dtype=np.float64)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    step = 0
    for e in range(epochs):
        for start in range(0, n, batch_size):
            idx = order[e, start : start + batch_size]
            xb = X[idx]
            if noise is not None:
                xb = xb + noise[e, start : start + batch_size]
            loss, g = loss_grad(arch, act, hidden, loss_kind, alpha, gamma, w, xb, y[idx])
            if not math.isfinite(loss) or not np.all(np.isfinite(g)):
                return w, losses[:step], step
            losses[step] = loss
            step += 1
            if opt_kind == 0:
                w -= lr * g
            else:
                adam_update(w, g, m, v, step, lr, beta1, beta2, eps)
            if not np.all(np.isfinite(w)):
                return w, losses[:step], step - 1
    return w, losses, -1
