"""Clients, clusters and the server loop for the three federation regimes.

Round structure (all regimes): broadcast, seeded dropout, local training on
each surviving client, aggregation, server-side evaluation on the merged test
set. Regimes differ only in how client weights are combined:

* ``conventional``: one weighted mean over every surviving client.
* ``clustered``: weighted mean inside each cluster, then an unweighted mean
  over the cluster results.
* ``specialized``: each cluster keeps its own model; the cluster mean is that
  cluster's new model, evaluated on its own modality only.
"""

from __future__ import annotations

import logging
import time
import zlib
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import kernels
from .data import Dataset
from .errors import ClientDivergenceError, DimensionError, NumericError, RoundError
from .metrics import EarlyStopper, EvalReport, report_from_predictions
from .model import ModelSpec, OptimizerKind, OptimizerSpec, init_params, predict_proba, sample_losses
from .params import ParameterVector, weighted_mean

log = logging.getLogger(__name__)

GLOBAL_KEY = "global"
_DROPOUT_STREAM = 0xD809
_CLIENT_STREAM = 0xC11E


class Regime(str, Enum):
    SPECIALIZED = "specialized"
    CONVENTIONAL = "conventional"
    CLUSTERED = "clustered"


class ClientWeighting(str, Enum):
    UNIFORM = "uniform"
    BY_SAMPLE_COUNT = "by_sample_count"


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    client_ids: tuple[str, ...]
    modality: str = ""

    def __post_init__(self):
        object.__setattr__(self, "client_ids", tuple(self.client_ids))
        if not self.client_ids:
            raise ValueError(f"cluster {self.cluster_id!r} has no clients")


@dataclass(frozen=True)
class Topology:
    clusters: tuple[Cluster, ...]
    regime: Regime = Regime.CLUSTERED

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "regime", Regime(self.regime))
        if not self.clusters:
            raise ValueError("topology needs at least one cluster")
        ids = [c for cl in self.clusters for c in cl.client_ids]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique across clusters")
        cids = [cl.cluster_id for cl in self.clusters]
        if len(set(cids)) != len(cids):
            raise ValueError("cluster ids must be unique")

    @property
    def client_ids(self) -> list[str]:
        return [c for cl in self.clusters for c in cl.client_ids]

    @property
    def n_clients(self) -> int:
        return sum(len(cl.client_ids) for cl in self.clusters)

    def with_regime(self, regime: Regime | str) -> Topology:
        return replace(self, regime=Regime(regime))


@dataclass(frozen=True)
class EarlyStopConfig:
    enabled: bool = False
    patience: int = 5
    min_delta: float = 1e-4


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 30
    epochs: int = 5
    batch_size: int = 16
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    client_weighting: ClientWeighting = ClientWeighting.UNIFORM
    dropout_probability: float = 0.0
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    master_seed: int = 0
    augment_noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "client_weighting", ClientWeighting(self.client_weighting))
        if self.rounds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, epochs and batch_size must be >= 1")
        if not 0.0 <= self.dropout_probability < 1.0:
            raise ValueError("dropout_probability must be in [0, 1)")
        if self.augment_noise_std < 0:
            raise ValueError("augment_noise_std must be non-negative")


def _stable_id(client_id: str) -> int:
    return zlib.crc32(client_id.encode("utf-8"))


def client_round_rng(master_seed: int, client_id: str, round_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(master_seed, spawn_key=(_CLIENT_STREAM, _stable_id(client_id), round_index))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class LocalUpdate:
    client_id: str
    params: ParameterVector
    num_samples: int
    batch_losses: np.ndarray = field(repr=False, compare=False)


class Client:
    """A simulated site. Its shard never leaves this object."""

    def __init__(self, client_id: str, shard: Dataset, master_seed: int = 0):
        if len(shard) == 0:
            raise ValueError(f"client {client_id!r} has an empty shard")
        self.client_id = client_id
        self.master_seed = master_seed
        self._shard = shard

    @property
    def num_samples(self) -> int:
        return len(self._shard)

    def local_train(
        self, incoming: ParameterVector, spec: ModelSpec, config: FederationConfig, round_index: int,
        backend=None,
    ) -> LocalUpdate:
        """Train from ``incoming`` for ``config.epochs`` epochs with fresh optimizer state."""
        if len(incoming) != spec.parameter_count:
            raise DimensionError(
                f"client {self.client_id!r}: incoming length {len(incoming)}, "
                f"model expects {spec.parameter_count}"
            )
        impl = backend or kernels
        n = len(self._shard)
        rng = client_round_rng(self.master_seed, self.client_id, round_index)
        order = np.stack([rng.permutation(n) for _ in range(config.epochs)]).astype(np.int64)
        noise = None
        if config.augment_noise_std > 0:
            noise = config.augment_noise_std * rng.standard_normal((config.epochs, n, spec.input_dim))
        opt = config.optimizer
        w, losses, bad = impl.train_local(
            *spec._codes(),
            0 if opt.kind is OptimizerKind.SGD else 1,
            opt.learning_rate, opt.adam_beta1, opt.adam_beta2, opt.adam_epsilon,
            incoming.values, self._shard.features, self._shard.labels.astype(np.float64),
            order, config.batch_size, noise,
        )
        if bad >= 0:
            raise ClientDivergenceError(self.client_id, bad, "non-finite loss or weights")
        return LocalUpdate(self.client_id, ParameterVector(w), n, losses)

    def training_loss(self, params: ParameterVector, spec: ModelSpec) -> float:
        """Mean loss of ``params`` on the local shard (stays on the client)."""
        return float(sample_losses(spec, params, self._shard.features, self._shard.labels).mean())


def client_local_train(
    client: Client, incoming: ParameterVector, spec: ModelSpec, config: FederationConfig, round_index: int = 1
) -> ParameterVector:
    return client.local_train(incoming, spec, config, round_index).params


def surviving_clients(topology: Topology, master_seed: int, round_index: int, dropout: float) -> set[str]:
    """Clients that stay connected in ``round_index``; a pure function of its arguments."""
    ids = topology.client_ids
    if dropout <= 0.0:
        return set(ids)
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(_DROPOUT_STREAM, round_index)))
    draws = rng.random(len(ids))
    return {cid for cid, u in zip(ids, draws) if u >= dropout}


def _weight(update: LocalUpdate, weighting: ClientWeighting) -> float:
    return float(update.num_samples) if weighting is ClientWeighting.BY_SAMPLE_COUNT else 1.0


def aggregate_conventional(
    updates: Sequence[tuple[ParameterVector, float]],
) -> ParameterVector:
    """Flat weighted mean over all client updates."""
    return weighted_mean([u for u, _ in updates], [w for _, w in updates])


def aggregate_clustered(
    cluster_updates: Sequence[Sequence[tuple[ParameterVector, float]]],
) -> ParameterVector:
    """Per-cluster weighted means, then the plain mean over clusters that reported."""
    cluster_means = [aggregate_conventional(u) for u in cluster_updates if u]
    if not cluster_means:
        raise RoundError("no cluster produced an update")
    return weighted_mean(cluster_means, [1.0] * len(cluster_means))


@dataclass
class RoundRecord:
    round: int
    regime: Regime
    loss: float
    accuracy: float
    macro_f1: float
    report: EvalReport
    participants: list[str]
    duration_s: float = 0.0


@dataclass
class ExperimentResult:
    regime: Regime
    records: list[RoundRecord]
    weights: dict[str, ParameterVector]
    best_round: int
    stopped_early: bool = False
    error: str | None = None

    @property
    def best_record(self) -> RoundRecord:
        return self.records[self.best_round - 1]

    @property
    def final_report(self) -> EvalReport:
        return self.best_record.report


class Federation:
    """Server plus clients for one regime.

    The server sees client ids, sample counts and returned weights only.
    """

    def __init__(
        self,
        topology: Topology,
        spec: ModelSpec,
        config: FederationConfig,
        shards: Mapping[str, Dataset],
        test: Dataset,
        threads: int = 1,
        backend=None,
    ):
        missing = [c for c in topology.client_ids if c not in shards]
        if missing:
            raise ValueError(f"no shard for clients {missing}")
        for cid in topology.client_ids:
            if shards[cid].input_dim != spec.input_dim:
                raise DimensionError(f"client {cid!r} data has input_dim {shards[cid].input_dim}")
        if test.input_dim != spec.input_dim:
            raise DimensionError(f"test set has input_dim {test.input_dim}")
        self.topology = topology
        self.spec = spec
        self.config = config
        self.threads = max(1, int(threads))
        self._backend = backend
        self._clients = {cid: Client(cid, shards[cid], config.master_seed) for cid in topology.client_ids}
        self._test = test
        w0 = init_params(spec)
        if topology.regime is Regime.SPECIALIZED:
            self.weights = {cl.cluster_id: w0 for cl in topology.clusters}
        else:
            self.weights = {GLOBAL_KEY: w0}
        self.round_index = 0

    @property
    def regime(self) -> Regime:
        return self.topology.regime

    def _model_for(self, cluster: Cluster) -> ParameterVector:
        key = cluster.cluster_id if self.regime is Regime.SPECIALIZED else GLOBAL_KEY
        return self.weights[key]

    def _train_all(self, jobs: list[tuple[str, ParameterVector]], round_index: int) -> dict[str, LocalUpdate]:
        def work(job):
            cid, incoming = job
            return self._clients[cid].local_train(incoming, self.spec, self.config, round_index, self._backend)

        if self.threads == 1 or len(jobs) <= 1:
            results = [work(j) for j in jobs]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(work, jobs))
        return {u.client_id: u for u in results}

    def run_round(self) -> RoundRecord:
        r = self.round_index + 1
        t0 = time.perf_counter()
        alive = surviving_clients(self.topology, self.config.master_seed, r, self.config.dropout_probability)
        jobs = [
            (cid, self._model_for(cl))
            for cl in self.topology.clusters
            for cid in cl.client_ids
            if cid in alive
        ]
        if not jobs:
            raise RoundError(f"round {r}: every client dropped out")
        updates = self._train_all(jobs, r)
        weighting = self.config.client_weighting
        per_cluster = [
            [(updates[cid].params, _weight(updates[cid], weighting)) for cid in cl.client_ids if cid in updates]
            for cl in self.topology.clusters
        ]
        if self.regime is Regime.CONVENTIONAL:
            self.weights = {GLOBAL_KEY: aggregate_conventional([u for group in per_cluster for u in group])}
        elif self.regime is Regime.CLUSTERED:
            self.weights = {GLOBAL_KEY: aggregate_clustered(per_cluster)}
        else:
            new = dict(self.weights)
            for cl, group in zip(self.topology.clusters, per_cluster):
                if group:
                    new[cl.cluster_id] = aggregate_conventional(group)
            self.weights = new
        self.round_index = r
        report = self.evaluate()
        participants = [cid for cid, _ in jobs]
        return RoundRecord(
            round=r, regime=self.regime, loss=report.loss, accuracy=report.accuracy,
            macro_f1=report.macro_f1, report=report, participants=participants,
            duration_s=time.perf_counter() - t0,
        )

    def evaluate(self, weights: Mapping[str, ParameterVector] | None = None) -> EvalReport:
        """Server-side metrics on the merged multi-modal test set."""
        weights = self.weights if weights is None else weights
        test = self._test
        if self.regime is not Regime.SPECIALIZED:
            w = weights[GLOBAL_KEY]
            probs = predict_proba(self.spec, w, test.features)
            losses = sample_losses(self.spec, w, test.features, test.labels)
            return report_from_predictions(test.labels, probs >= 0.5, test.tags, losses)
        probs = np.full(len(test), np.nan)
        losses = np.full(len(test), np.nan)
        for cl in self.topology.clusters:
            mask = test.tags == cl.modality
            if not mask.any():
                continue
            w = weights[cl.cluster_id]
            probs[mask] = predict_proba(self.spec, w, test.features[mask])
            losses[mask] = sample_losses(self.spec, w, test.features[mask], test.labels[mask])
        covered = ~np.isnan(probs)
        if not covered.any():
            raise RoundError("no test samples match any cluster modality")
        return report_from_predictions(
            test.labels[covered], probs[covered] >= 0.5, test.tags[covered], losses[covered]
        )


def run_experiment(
    topology: Topology,
    spec: ModelSpec,
    config: FederationConfig,
    shards: Mapping[str, Dataset],
    test: Dataset,
    threads: int = 1,
    backend=None,
) -> ExperimentResult:
    """Run up to ``config.rounds`` rounds; return every record and the best-loss weights."""
    fed = Federation(topology, spec, config, shards, test, threads=threads, backend=backend)
    es = config.early_stop
    stopper = EarlyStopper(es.patience, es.min_delta)
    records: list[RoundRecord] = []
    best_weights = dict(fed.weights)
    error = None
    for _ in range(config.rounds):
        try:
            rec = fed.run_round()
        except (RoundError, NumericError) as exc:
            # keep what finished; a failed round ends the experiment
            error = str(exc)
            log.warning("experiment aborted: %s", exc)
            if not records:
                raise
            break
        records.append(rec)
        stop = stopper.update(rec.loss)
        if stopper.best_index == len(records) - 1:
            best_weights = dict(fed.weights)
        if es.enabled and stop:
            log.info("early stop after round %d (best round %d)", rec.round, stopper.best_index + 1)
            break
    return ExperimentResult(
        regime=topology.regime,
        records=records,
        weights=best_weights,
        best_round=stopper.best_index + 1,
        stopped_early=es.enabled and stopper.stopped_at is not None,
        error=error,
    )
