"""Clustered federated learning simulator for multi-modal binary classification."""

from .data import Dataset, ModalitySpec, bimodal_specs, generate_modality
from .errors import CFLError
from .experiment import build_benchmark, default_benchmark, run_regimes
from .federation import (
    Cluster,
    EarlyStopConfig,
    Federation,
    FederationConfig,
    Regime,
    Topology,
    run_experiment,
)
from .kernels import BACKEND
from .metrics import evaluate
from .model import LossSpec, ModelSpec, OptimizerSpec
from .params import ParameterVector, weighted_mean

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CFLError",
    "Cluster",
    "Dataset",
    "EarlyStopConfig",
    "Federation",
    "FederationConfig",
    "LossSpec",
    "ModalitySpec",
    "ModelSpec",
    "OptimizerSpec",
    "ParameterVector",
    "Regime",
    "Topology",
    "bimodal_specs",
    "build_benchmark",
    "default_benchmark",
    "evaluate",
    "generate_modality",
    "run_experiment",
    "run_regimes",
    "weighted_mean",
]
