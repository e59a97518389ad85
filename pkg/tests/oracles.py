"""Independent reference computations used as test oracles.

Nothing here calls into the package's kernels.
"""

import math
from fractions import Fraction

import numpy as np

# Gradient components smaller than this are compared on an absolute scale:
# central differences at h=1e-6 carry ~1e-10 of rounding noise.
GRAD_FLOOR = 1e-4


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def reference_logits(spec, params, X):
    params = np.asarray(params, dtype=np.float64)
    d = spec.input_dim
    out = []
    for x in np.asarray(X, dtype=np.float64):
        if spec.architecture.value == "logistic":
            z = math.fsum(x[j] * params[j] for j in range(d)) + params[d]
        else:
            h = spec.hidden_units
            z = params[d * h + 2 * h]
            for k in range(h):
                a = params[d * h + k] + math.fsum(x[j] * params[j * h + k] for j in range(d))
                act = max(a, 0.0) if spec.activation.value == "relu" else math.tanh(a)
                z += act * params[d * h + h + k]
        out.append(z)
    return np.array(out)


def reference_losses(spec, params, X, y):
    """Per-sample loss from the textbook definition, in scalar Python."""
    lo, hi = 1e-12, 1 - 1e-12
    alpha, gamma = spec.loss.alpha, spec.loss.gamma
    out = []
    for z, label in zip(reference_logits(spec, params, X), np.asarray(y)):
        s = 1.0 if label == 1 else -1.0
        pt = min(max(_sigmoid(s * z), lo), hi)
        qt = min(max(_sigmoid(-s * z), lo), hi)
        if spec.loss.kind.value == "cross_entropy":
            out.append(-math.log(pt))
        else:
            at = alpha if label == 1 else 1 - alpha
            out.append(-at * qt**gamma * math.log(pt))
    return np.array(out)


def central_difference(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_relative_error(a, b, floor=GRAD_FLOOR):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def brute_force_mean(vectors, weights):
    """sum(w_i v_i) / sum(w_i) in exact rational arithmetic, rounded once."""
    total = sum(Fraction(float(w)) for w in weights)
    n = len(vectors[0])
    return np.array(
        [float(sum(Fraction(float(w)) * Fraction(float(v[j])) for v, w in zip(vectors, weights)) / total) for j in range(n)]
    )


# (regime, modality, class, precision, recall, printed F1) from the reference comparison table
REFERENCE_PRF = [
    ("specialized", "xray", "covid", 0.73, 0.82, 0.77),
    ("specialized", "xray", "healthy", 0.97, 0.95, 0.96),
    ("specialized", "ultrasound", "covid", 0.97, 0.95, 0.97),
    ("specialized", "ultrasound", "healthy", 0.88, 0.93, 0.90),
    ("conventional", "xray", "covid", 0.30, 0.68, 0.41),
    ("conventional", "xray", "healthy", 0.93, 0.74, 0.82),
    ("conventional", "ultrasound", "covid", 0.94, 0.76, 0.84),
    ("conventional", "ultrasound", "healthy", 0.58, 0.87, 0.69),
    ("clustered", "xray", "covid", 0.71, 0.82, 0.76),
    ("clustered", "xray", "healthy", 0.97, 0.94, 0.96),
    ("clustered", "ultrasound", "covid", 0.93, 0.95, 0.94),
    ("clustered", "ultrasound", "healthy", 0.86, 0.80, 0.83),
]
