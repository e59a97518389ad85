import inspect
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cflsim.data import Dataset
from cflsim.errors import ClientDivergenceError, DimensionError, RoundError
from cflsim.experiment import default_benchmark, run_regimes
from cflsim.federation import (
    Client,
    Cluster,
    EarlyStopConfig,
    ExperimentResult,
    Federation,
    FederationConfig,
    Regime,
    RoundRecord,
    Topology,
    aggregate_clustered,
    aggregate_conventional,
    client_local_train,
    run_experiment,
    surviving_clients,
)
from cflsim.model import ModelSpec, OptimizerSpec
from cflsim.params import ParameterVector

from .oracles import brute_force_mean

SMALL_SPEC = ModelSpec(3, "mlp", hidden_units=4, init_seed=1)


def small_world(sizes=(2, 1), n=24, seed=0):
    """Tiny topology: cluster k gets ``sizes[k]`` clients with modality tag ``m{k}``."""
    rng = np.random.default_rng(seed)
    clusters, shards, tests = [], {}, []
    for k, m in enumerate(sizes):
        ids = [f"m{k}-{j}" for j in range(m)]
        for cid in ids:
            X = rng.normal(size=(n, 3)) + k
            y = np.arange(n) % 2
            shards[cid] = Dataset(X, y, [f"m{k}"] * n)
        clusters.append(Cluster(f"c{k}", ids, modality=f"m{k}"))
        tests.append(Dataset(rng.normal(size=(10, 3)) + k, np.arange(10) % 2, [f"m{k}"] * 10))
    test = Dataset(
        np.concatenate([t.features for t in tests]),
        np.concatenate([t.labels for t in tests]),
        np.concatenate([t.tags for t in tests]),
    )
    return Topology(clusters), shards, test


def pv(*v):
    return ParameterVector(list(v))


class TestAggregationExamples:
    def test_symmetric_case_regimes_coincide(self):
        assert aggregate_clustered([[(pv(0, 2), 1.0)], [(pv(2, 0), 1.0)]]) == pv(1, 1)
        assert aggregate_conventional([(pv(0, 2), 1.0), (pv(2, 0), 1.0)]) == pv(1, 1)

    def test_unequal_clusters_differ(self):
        clustered = aggregate_clustered([[(pv(4, 0), 1.0), (pv(0, 4), 1.0)], [(pv(0, 0), 1.0)]])
        conventional = aggregate_conventional([(pv(4, 0), 1.0), (pv(0, 4), 1.0), (pv(0, 0), 1.0)])
        assert clustered == pv(1, 1)
        assert np.allclose(conventional.values, [4 / 3, 4 / 3], rtol=1e-15)

    def test_empty_cluster_is_skipped(self):
        assert aggregate_clustered([[(pv(2, 2), 1.0)], []]) == pv(2, 2)
        with pytest.raises(RoundError):
            aggregate_clustered([[], []])

    @settings(max_examples=100)
    @given(st.data())
    def test_brute_force_oracle(self, data):
        k = data.draw(st.integers(1, 4))
        n = data.draw(st.integers(1, 8))
        sizes = [data.draw(st.integers(1, 5)) for _ in range(k)]
        rng = np.random.default_rng(data.draw(st.integers(0, 2**32)))
        groups = [[(ParameterVector(rng.normal(size=n)), float(rng.uniform(0.1, 10))) for _ in range(m)] for m in sizes]
        flat = [u for g in groups for u in g]
        expected_flat = brute_force_mean([u.values for u, _ in flat], [w for _, w in flat])
        means = [brute_force_mean([u.values for u, _ in g], [w for _, w in g]) for g in groups]
        expected_two_level = brute_force_mean(means, [1.0] * k)
        assert np.allclose(aggregate_conventional(flat).values, expected_flat, rtol=1e-12, atol=1e-14)
        assert np.allclose(aggregate_clustered(groups).values, expected_two_level, rtol=1e-12, atol=1e-14)

    @settings(max_examples=100)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**32))
    def test_equal_sizes_uniform_weights_coincide(self, k, m, n, seed):
        rng = np.random.default_rng(seed)
        groups = [[(ParameterVector(rng.normal(size=n)), 1.0) for _ in range(m)] for _ in range(k)]
        a = aggregate_clustered(groups).values
        b = aggregate_conventional([u for g in groups for u in g]).values
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


class TestRound:
    def test_single_client_is_identity(self):
        topo, shards, test = small_world((1,))
        cfg = FederationConfig(rounds=1, epochs=2, optimizer=OptimizerSpec("adam", 1e-2))
        fed = Federation(topo, SMALL_SPEC, cfg, shards, test)
        start = fed.weights["global"]
        fed.run_round()
        expected = Client("m0-0", shards["m0-0"], cfg.master_seed).local_train(start, SMALL_SPEC, cfg, 1).params
        assert fed.weights["global"] == expected

    @pytest.mark.parametrize("regime", list(Regime))
    @pytest.mark.parametrize("dropout", [0.0, 0.4])
    def test_zero_learning_rate_conserves_weights(self, regime, dropout):
        topo, shards, test = small_world((3, 2))
        cfg = FederationConfig(rounds=6, epochs=2, optimizer=OptimizerSpec("adam", 0.0), dropout_probability=dropout)
        fed = Federation(topo.with_regime(regime), SMALL_SPEC, cfg, shards, test)
        start = dict(fed.weights)
        for _ in range(6):
            try:
                fed.run_round()
            except RoundError:
                continue
            assert fed.weights == start

    def test_records_and_participants(self):
        topo, shards, test = small_world((2, 2))
        cfg = FederationConfig(rounds=3, epochs=1)
        res = run_experiment(topo, SMALL_SPEC, cfg, shards, test)
        assert [r.round for r in res.records] == [1, 2, 3]
        assert res.records[0].participants == topo.client_ids
        assert res.weights["global"].values.shape == (SMALL_SPEC.parameter_count,)

    def test_one_round(self):
        topo, shards, test = small_world()
        res = run_experiment(topo, SMALL_SPEC, FederationConfig(rounds=1, epochs=1), shards, test)
        assert len(res.records) == 1 and res.best_round == 1

    def test_specialized_evaluates_own_modality(self):
        topo, shards, test = small_world((1, 1))
        cfg = FederationConfig(rounds=1, epochs=1)
        fed = Federation(topo.with_regime("specialized"), SMALL_SPEC, cfg, shards, test)
        rec = fed.run_round()
        assert set(fed.weights) == {"c0", "c1"}
        assert set(rec.report.per_modality) == {"m0", "m1"}
        assert rec.report.confusion.total == len(test)

    def test_divergence_names_client(self):
        topo, shards, test = small_world((1,))
        huge = Dataset(shards["m0-0"].features * 1e300, shards["m0-0"].labels)
        cfg = FederationConfig(rounds=1, epochs=1, optimizer=OptimizerSpec("sgd", 1e300))
        with pytest.raises(ClientDivergenceError, match="m0-0"):
            Federation(topo, SMALL_SPEC, cfg, {"m0-0": huge}, test).run_round()

    def test_dimension_mismatch(self):
        topo, shards, test = small_world()
        with pytest.raises(DimensionError):
            Federation(topo, ModelSpec(4), FederationConfig(), shards, test)
        client = Client("a", shards["m0-0"])
        with pytest.raises(DimensionError):
            client.local_train(pv(1, 2), SMALL_SPEC, FederationConfig(), 1)


class TestDropout:
    def test_pure_function(self):
        topo, _, _ = small_world((4, 4))
        a = [surviving_clients(topo, 7, r, 0.5) for r in range(1, 20)]
        b = [surviving_clients(topo, 7, r, 0.5) for r in range(1, 20)]
        assert a == b
        assert len({frozenset(s) for s in a}) > 1

    def test_zero_probability_keeps_everyone(self):
        topo, _, _ = small_world((2, 3))
        assert surviving_clients(topo, 1, 1, 0.0) == set(topo.client_ids)

    def test_all_dropped_is_round_error(self):
        topo, shards, test = small_world((1,))
        seed = next(s for s in range(1000) if not surviving_clients(topo, s, 1, 0.9))
        cfg = FederationConfig(rounds=2, dropout_probability=0.9, master_seed=seed)
        with pytest.raises(RoundError, match="dropped"):
            run_experiment(topo, SMALL_SPEC, cfg, shards, test)

    def test_partial_records_kept(self):
        topo, shards, test = small_world((1,))
        seed = next(
            s for s in range(5000)
            if surviving_clients(topo, s, 1, 0.5) and not surviving_clients(topo, s, 2, 0.5)
        )
        cfg = FederationConfig(rounds=3, epochs=1, dropout_probability=0.5, master_seed=seed)
        res = run_experiment(topo, SMALL_SPEC, cfg, shards, test)
        assert len(res.records) == 1
        assert "dropped" in res.error


class TestLocalTraining:
    def test_zero_lr_returns_incoming(self):
        _, shards, _ = small_world((1,))
        w = pv(*np.linspace(-1, 1, SMALL_SPEC.parameter_count))
        cfg = FederationConfig(epochs=3, optimizer=OptimizerSpec("adam", 0.0))
        assert client_local_train(Client("a", shards["m0-0"]), w, SMALL_SPEC, cfg) == w

    def test_identical_clients_identical_updates(self):
        _, shards, _ = small_world((1,))
        w = pv(*np.linspace(-1, 1, SMALL_SPEC.parameter_count))
        cfg = FederationConfig(epochs=2)
        a = Client("same", shards["m0-0"], 3).local_train(w, SMALL_SPEC, cfg, 4)
        b = Client("same", shards["m0-0"], 3).local_train(w, SMALL_SPEC, cfg, 4)
        assert a.params == b.params
        assert a.params != w

    def test_incoming_not_mutated(self):
        _, shards, _ = small_world((1,))
        raw = np.linspace(-1, 1, SMALL_SPEC.parameter_count)
        w = ParameterVector(raw)
        Client("a", shards["m0-0"]).local_train(w, SMALL_SPEC, FederationConfig(epochs=1), 1)
        assert np.array_equal(w.values, raw)

    def test_steps_per_epoch(self):
        _, shards, _ = small_world((1,), n=33)
        up = Client("a", shards["m0-0"]).local_train(
            ParameterVector(np.zeros(SMALL_SPEC.parameter_count)), SMALL_SPEC, FederationConfig(epochs=3, batch_size=16), 1
        )
        assert up.batch_losses.size == 3 * 3

    @pytest.mark.parametrize("regime", ["clustered", "conventional"])
    def test_local_loss_decreases_on_default_benchmark(self, regime):
        # each round starts from the broadcast global model; local training
        # must lower the client's own loss in at least 90% of rounds
        from cflsim.cli import default_experiment

        spec, cfg = default_experiment()
        bench = default_benchmark(1)
        spec, cfg = replace(spec, init_seed=1), replace(cfg, master_seed=1)
        fed = Federation(bench.topology.with_regime(regime), spec, cfg, bench.shards, bench.test)
        clients = {cid: Client(cid, shard, 1) for cid, shard in bench.shards.items()}
        improved = {cid: 0 for cid in clients}
        for r in range(1, cfg.rounds + 1):
            w = fed.weights["global"]
            for cid, client in clients.items():
                after = client.local_train(w, spec, cfg, r).params
                improved[cid] += client.training_loss(after, spec) < client.training_loss(w, spec)
            fed.run_round()
        assert min(improved.values()) >= 0.9 * cfg.rounds


class TestEarlyStopping:
    def _inject(self, monkeypatch, losses):
        original = Federation.run_round
        it = iter(losses)

        def fake(self):
            rec = original(self)
            rec.loss = next(it)
            return rec

        monkeypatch.setattr(Federation, "run_round", fake)

    def test_injected_sequence(self, monkeypatch):
        self._inject(monkeypatch, [1.0, 0.9, 0.8, 0.85, 0.86, 0.87, 0.88, 0.89])
        topo, shards, test = small_world((1, 1))
        cfg = FederationConfig(rounds=8, epochs=1, early_stop=EarlyStopConfig(True, 2, 1e-4))
        res = run_experiment(topo, SMALL_SPEC, cfg, shards, test)
        assert len(res.records) == 5
        assert res.best_round == 3
        assert res.stopped_early

    def test_best_round_weights_returned(self, monkeypatch):
        seen = []
        original = Federation.run_round
        losses = iter([1.0, 0.5, 0.7, 0.9])

        def fake(self):
            rec = original(self)
            rec.loss = next(losses)
            seen.append(dict(self.weights))
            return rec

        monkeypatch.setattr(Federation, "run_round", fake)
        topo, shards, test = small_world((1, 1))
        res = run_experiment(topo, SMALL_SPEC, FederationConfig(rounds=4, epochs=1), shards, test)
        assert res.best_round == 2
        assert res.weights == seen[1]
        assert res.final_report is res.records[1].report
        assert not res.stopped_early

    def test_decreasing_never_stops(self, monkeypatch):
        self._inject(monkeypatch, [1.0 - 0.05 * i for i in range(10)])
        topo, shards, test = small_world((1,))
        cfg = FederationConfig(rounds=10, epochs=1, early_stop=EarlyStopConfig(True, 2, 1e-4))
        res = run_experiment(topo, SMALL_SPEC, cfg, shards, test)
        assert len(res.records) == 10 and not res.stopped_early


class TestDeterminism:
    @pytest.mark.parametrize("regime", list(Regime))
    def test_thread_count_does_not_matter(self, regime):
        topo, shards, test = small_world((3, 2))
        cfg = FederationConfig(rounds=4, epochs=2, dropout_probability=0.2, master_seed=5)
        runs = [run_experiment(topo.with_regime(regime), SMALL_SPEC, cfg, shards, test, threads=t) for t in (1, 4, 1)]
        for other in runs[1:]:
            assert [r.loss for r in other.records] == [r.loss for r in runs[0].records]
            assert [r.participants for r in other.records] == [r.participants for r in runs[0].records]
            assert other.weights == runs[0].weights

    def test_seed_changes_run(self):
        topo, shards, test = small_world((2,))
        a = run_experiment(topo, SMALL_SPEC, FederationConfig(rounds=1, master_seed=1), shards, test)
        b = run_experiment(topo, SMALL_SPEC, FederationConfig(rounds=1, master_seed=2), shards, test)
        assert a.weights != b.weights


class TestIsolation:
    """Only weights and metrics cross the client boundary."""

    CLIENT_SURFACE = {"client_id", "master_seed", "num_samples", "local_train", "training_loss"}

    def _public(self, obj):
        return {n for n in dir(obj) if not n.startswith("_")}

    def test_client_surface(self):
        _, shards, _ = small_world((1,))
        assert self._public(Client("a", shards["m0-0"])) == self.CLIENT_SURFACE

    def test_no_public_member_yields_a_dataset(self):
        topo, shards, test = small_world((2, 1))
        fed = Federation(topo, SMALL_SPEC, FederationConfig(rounds=1, epochs=1), shards, test)
        rec = fed.run_round()
        res = run_experiment(topo, SMALL_SPEC, FederationConfig(rounds=1, epochs=1), shards, test)
        shard_arrays = [s.features for s in shards.values()]

        def check(value, path):
            assert not isinstance(value, (Dataset, Client)), path
            if isinstance(value, np.ndarray):
                for arr in shard_arrays:
                    assert not np.shares_memory(value, arr), path
            if isinstance(value, dict):
                for k, v in value.items():
                    check(v, f"{path}[{k!r}]")
            if isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    check(v, f"{path}[{i}]")

        for obj in (fed, rec, res):
            for name in self._public(obj):
                value = getattr(obj, name)
                if inspect.ismethod(value):
                    params = inspect.signature(value).parameters
                    if all(p.default is not p.empty for p in params.values()) and name != "run_round":
                        check(value(), f"{type(obj).__name__}.{name}()")
                else:
                    check(value, f"{type(obj).__name__}.{name}")

    def test_record_types(self):
        assert set(RoundRecord.__dataclass_fields__) == {
            "round", "regime", "loss", "accuracy", "macro_f1", "report", "participants", "duration_s",
        }
        assert "shards" not in ExperimentResult.__dataclass_fields__


class TestTopology:
    def test_unique_ids(self):
        with pytest.raises(ValueError):
            Topology([Cluster("a", ["x"]), Cluster("b", ["x"])])
        with pytest.raises(ValueError):
            Topology([Cluster("a", ["x"]), Cluster("a", ["y"])])

    def test_counts(self):
        topo = Topology([Cluster("a", ["x", "y"]), Cluster("b", ["z"])])
        assert topo.n_clients == 3 == len(topo.client_ids)

    def test_config_bounds(self):
        for bad in ({"rounds": 0}, {"epochs": 0}, {"batch_size": 0}, {"dropout_probability": 1.0}):
            with pytest.raises(ValueError):
                FederationConfig(**bad)


def test_run_regimes_overrides_seed():
    bench = default_benchmark(0, clients_per_cluster=(1, 1))
    cfg = FederationConfig(rounds=1, epochs=1)
    out = run_regimes(bench, ModelSpec(32), cfg, ["clustered"], seed=3)
    again = run_regimes(bench, ModelSpec(32), replace(cfg, master_seed=3), ["clustered"], seed=3)
    assert out[Regime.CLUSTERED].weights == again[Regime.CLUSTERED].weights
