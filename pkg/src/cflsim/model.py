"""Binary classifiers trained on clients: specs, losses, gradients, optimizers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from ._pykernels import P_MAX, P_MIN
from .errors import DimensionError, NumericError
from .params import ParameterVector


class Architecture(str, Enum):
    LOGISTIC = "logistic"
    MLP = "mlp"


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    FOCAL = "focal"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.FOCAL
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    architecture: Architecture = Architecture.LOGISTIC
    hidden_units: int = 16
    activation: Activation = Activation.RELU
    loss: LossSpec = field(default_factory=LossSpec)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.architecture is Architecture.MLP and self.hidden_units < 1:
            raise ValueError("hidden_units must be positive")
        if not 0 <= self.init_seed < 2**64:
            raise ValueError("init_seed must be a 64-bit unsigned integer")

    @property
    def parameter_count(self) -> int:
        d = self.input_dim
        if self.architecture is Architecture.LOGISTIC:
            return d + 1
        h = self.hidden_units
        return d * h + h + h + 1

    def _codes(self) -> tuple[int, int, int, int, float, float]:
        arch = 0 if self.architecture is Architecture.LOGISTIC else 1
        act = 0 if self.activation is Activation.RELU else 1
        hidden = self.hidden_units if arch == 1 else 0
        loss = 0 if self.loss.kind is LossKind.CROSS_ENTROPY else 1
        return arch, act, hidden, loss, float(self.loss.alpha), float(self.loss.gamma)


@dataclass(frozen=True)
class OptimizerSpec:
    kind: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "kind", OptimizerKind(self.kind))
        # zero is allowed so a frozen client can be simulated
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def init_params(spec: ModelSpec) -> ParameterVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(spec.init_seed)
    d = spec.input_dim
    if spec.architecture is Architecture.LOGISTIC:
        bound = 1.0 / math.sqrt(d)
        return ParameterVector(np.concatenate([rng.uniform(-bound, bound, d), [0.0]]))
    h = spec.hidden_units
    b1 = 1.0 / math.sqrt(d)
    b2 = 1.0 / math.sqrt(h)
    w1 = rng.uniform(-b1, b1, d * h)
    w2 = rng.uniform(-b2, b2, h)
    return ParameterVector(np.concatenate([w1, np.zeros(h), w2, [0.0]]))


def _check_params(spec: ModelSpec, params: ParameterVector | np.ndarray) -> np.ndarray:
    arr = params.values if isinstance(params, ParameterVector) else np.asarray(params, np.float64)
    if arr.size != spec.parameter_count:
        raise DimensionError(
            f"params have length {arr.size}, spec expects {spec.parameter_count}"
        )
    return arr


def _check_features(spec: ModelSpec, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise DimensionError(f"features have dimension {X.shape[1]}, expected {spec.input_dim}")
    return X


def predict_proba(spec: ModelSpec, params: ParameterVector, X) -> np.ndarray:
    """Clamped positive-class probabilities for each row of ``X``."""
    w = _check_params(spec, params)
    X = _check_features(spec, X)
    arch, act, hidden, *_ = spec._codes()
    return kernels._pykernels.predict_proba(arch, act, hidden, w, X)


def forward(spec: ModelSpec, params: ParameterVector, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("forward takes a single feature vector")
    return float(predict_proba(spec, params, x[None, :])[0])


def focal_loss(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """-alpha_t * (1 - p_t)**gamma * ln(p_t) for a single prediction."""
    p = min(max(float(p), P_MIN), P_MAX)
    if y == 1:
        pt, at = p, alpha
    else:
        pt, at = 1.0 - p, 1.0 - alpha
    return -at * (1.0 - pt) ** gamma * math.log(pt)


def cross_entropy(p: float, y: int) -> float:
    p = min(max(float(p), P_MIN), P_MAX)
    return -math.log(p if y == 1 else 1.0 - p)


def sample_losses(spec: ModelSpec, params: ParameterVector, X, y) -> np.ndarray:
    w = _check_params(spec, params)
    X = _check_features(spec, X)
    return kernels._pykernels.sample_losses(*spec._codes(), w, X, np.asarray(y, np.float64))


def loss_and_gradient(spec: ModelSpec, params: ParameterVector, X, y) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its exact gradient w.r.t. ``params``."""
    w = _check_params(spec, params)
    X = _check_features(spec, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise DimensionError("empty batch")
    if y.size != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} samples but {y.size} labels")
    loss, grad = kernels.loss_grad(*spec._codes(), w, X, y)
    if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
        per_sample = sample_losses(spec, w, X, y)
        bad = np.flatnonzero(~np.isfinite(per_sample))
        where = f"sample {int(bad[0])}" if bad.size else "gradient"
        raise NumericError(f"non-finite loss or gradient at {where}")
    return loss, grad


@dataclass
class OptimizerState:
    spec: OptimizerSpec
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, spec: OptimizerSpec, n: int) -> OptimizerState:
        return cls(spec, np.zeros(n), np.zeros(n))


def optimizer_step(
    state: OptimizerState, gradient, params: ParameterVector
) -> tuple[ParameterVector, OptimizerState]:
    g = np.asarray(gradient, dtype=np.float64)
    w = params.to_numpy()
    if g.shape != w.shape or state.m.shape != w.shape:
        raise DimensionError(f"gradient {g.shape}, params {w.shape}, state {state.m.shape}")
    spec = state.spec
    if spec.kind is OptimizerKind.SGD:
        return ParameterVector(w - spec.learning_rate * g), state
    m, v = state.m.copy(), state.v.copy()
    step = state.step + 1
    kernels._pykernels.adam_update(
        w, g, m, v, step, spec.learning_rate, spec.adam_beta1, spec.adam_beta2, spec.adam_epsilon
    )
    return ParameterVector(w), OptimizerState(spec, m, v, step)
