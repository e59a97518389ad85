"""Builds federations from per-modality datasets and runs regime comparisons."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .data import (
    Dataset,
    bimodal_specs,
    generate_modality,
    merge_test_sets,
    partition_for_clients,
    train_test_split,
)
from .errors import NumericError
from .federation import Cluster, ExperimentResult, FederationConfig, Regime, Topology, run_experiment
from .metrics import evaluate
from .model import LossSpec, ModelSpec, OptimizerKind, OptimizerSpec, init_params
from .params import ParameterVector


@dataclass
class Benchmark:
    """Client shards, cluster layout and the merged server test set."""

    topology: Topology
    shards: dict[str, Dataset]
    test: Dataset
    train: dict[str, Dataset]


def build_benchmark(
    modalities: Sequence[Dataset],
    clients_per_cluster: Sequence[int],
    split_seed: int = 0,
    test_fraction: float = 0.2,
) -> Benchmark:
    """One cluster per modality dataset; each dataset is split then dealt to its clients."""
    if len(modalities) != len(clients_per_cluster):
        raise ValueError("need one client count per modality")
    clusters, shards, tests, trains = [], {}, [], {}
    for k, (ds, m) in enumerate(zip(modalities, clients_per_cluster)):
        tags = ds.modalities()
        if len(tags) != 1:
            raise ValueError(f"modality dataset {k} carries tags {tags}, expected exactly one")
        tag = tags[0] or f"modality{k}"
        train, test = train_test_split(ds, test_fraction, seed=split_seed * 1000 + k)
        parts = partition_for_clients(train, m, seed=split_seed * 1000 + 500 + k)
        ids = [f"{tag}-{j}" for j in range(m)]
        shards.update(zip(ids, parts))
        clusters.append(Cluster(cluster_id=tag, client_ids=tuple(ids), modality=tag))
        tests.append(test)
        trains[tag] = train
    return Benchmark(Topology(tuple(clusters)), shards, merge_test_sets(tests), trains)


def default_benchmark(seed: int = 0, clients_per_cluster: Sequence[int] = (3, 3), **spec_kwargs) -> Benchmark:
    """The shipped two-modality benchmark, generated and split from ``seed``."""
    specs = bimodal_specs(seed=seed, **spec_kwargs)
    return build_benchmark([generate_modality(s) for s in specs], clients_per_cluster, split_seed=seed)


def fit_central(
    spec: ModelSpec, train: Dataset, optimizer: OptimizerSpec, epochs: int = 20, batch_size: int = 16, seed: int = 0
) -> ParameterVector:
    """Plain single-site training, used for reference models outside any federation."""
    rng = np.random.default_rng(seed)
    order = np.stack([rng.permutation(len(train)) for _ in range(epochs)]).astype(np.int64)
    w, _, bad = kernels.train_local(
        *spec._codes(),
        0 if optimizer.kind is OptimizerKind.SGD else 1,
        optimizer.learning_rate, optimizer.adam_beta1, optimizer.adam_beta2, optimizer.adam_epsilon,
        init_params(spec).values, train.features, train.labels.astype(np.float64),
        order, batch_size, None,
    )
    if bad >= 0:
        raise NumericError(f"central training diverged at step {bad}")
    return ParameterVector(w)


def modality_divergence(
    seed: int = 0, source: str = "xray", target: str = "ultrasound", **spec_kwargs
) -> tuple[float, float]:
    """Macro-F1 of a logistic model fit on ``source``: on held-out ``source`` and on ``target``.

    A large gap means the two modalities really are different distributions.
    """
    bench = default_benchmark(seed, **spec_kwargs)
    spec = ModelSpec(bench.test.input_dim, "logistic", loss=LossSpec("cross_entropy"), init_seed=seed)
    w = fit_central(spec, bench.train[source], OptimizerSpec("adam", 1e-2), seed=seed)
    report = evaluate(spec, w, bench.test)
    return report.per_modality[source].macro_f1, report.per_modality[target].macro_f1


def run_regimes(
    bench: Benchmark,
    spec: ModelSpec,
    config: FederationConfig,
    regimes: Sequence[Regime | str] = tuple(Regime),
    seed: int | None = None,
    threads: int = 1,
) -> dict[Regime, ExperimentResult]:
    """Run each regime on the same shards; ``seed`` overrides the master seed and model init."""
    if seed is not None:
        config = replace(config, master_seed=seed)
        spec = replace(spec, init_seed=seed)
    out = {}
    for regime in regimes:
        regime = Regime(regime)
        out[regime] = run_experiment(
            bench.topology.with_regime(regime), spec, config, bench.shards, bench.test, threads=threads
        )
    return out
