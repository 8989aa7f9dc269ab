import numpy as np
import pytest

from e2e import SEEDS, final_accuracy
from fedtsdp.baselines import StrategySpec, fedavg_round, fedper_round, fedper_split, fedprox_round
from fedtsdp.data import Client, DataSpec
from fedtsdp.nn_core import TrainConfig
from fedtsdp.orchestrator import FedConfig, client_model, run_experiment, setup

DATA = DataSpec(scheme="dirichlet", beta=0.5, classes=4, features=5, per_class=40, public_per_class=20)
HIDDEN = (8, 8)


def start(strategy, k=3, seed=0, **fed):
    cfg = FedConfig(client_count=k, rounds=1, strategy=strategy, **fed)
    clients, state = setup(cfg, DATA, HIDDEN, seed)
    return cfg, clients, state


def flat(state):
    return np.concatenate([m.flatten() for m in state.cluster_models])


def test_identical_clients_average_to_their_model():
    cfg, clients, state = start("fedavg")
    twin = clients[0]
    clones = [Client(i, twin.train, twin.test, 0) for i in range(3)]
    full_batch = TrainConfig(batch_size=10_000)
    out = fedavg_round(state, clones, cfg, full_batch, seed=0)
    for i in range(3):
        np.testing.assert_allclose(out.cluster_models[0].flatten(), out.client_weights[i].flatten(),
                                   rtol=1e-13, atol=1e-15)


def test_fedavg_weighted_mean_oracle():
    cfg, clients, state = start("fedavg")
    assert len({c.n for c in clients}) > 1
    out = fedavg_round(state, clients, cfg, TrainConfig(), seed=0)
    sizes = np.array([c.n for c in clients], dtype=float)
    naive = sum(n * out.client_weights[i].flatten() for i, n in enumerate(sizes)) / sizes.sum()
    np.testing.assert_allclose(out.cluster_models[0].flatten(), naive, atol=1e-14)


def test_fedavg_equal_pair_is_midpoint():
    data = DataSpec(classes=2, features=3, per_class=20, public_per_class=20)
    cfg = FedConfig(client_count=2, rounds=1, strategy="fedavg")
    clients, state = setup(cfg, data, (4,), 0)
    out = fedavg_round(state, clients, cfg, TrainConfig(), seed=0)
    mid = 0.5 * (out.client_weights[0].flatten() + out.client_weights[1].flatten())
    np.testing.assert_allclose(out.cluster_models[0].flatten(), mid, atol=1e-15)


def test_fedprox_single_step_matches_fedavg():
    one_step = TrainConfig(batch_size=10_000, local_epochs=1)
    cfg, clients, state = start("fedprox", prox_mu=0.5)
    prox = fedprox_round(state, clients, cfg, one_step, seed=0)
    avg = fedavg_round(state, clients, cfg, one_step, seed=0)
    assert flat(prox).tobytes() == flat(avg).tobytes()


def test_fedprox_vanishing_mu_tracks_fedavg():
    for seed in range(3):
        a = run_experiment(FedConfig(client_count=3, rounds=5, strategy="fedavg"), TrainConfig(), DATA, HIDDEN, seed)[1]
        p = run_experiment(FedConfig(client_count=3, rounds=5, strategy="fedprox", prox_mu=1e-8), TrainConfig(),
                           DATA, HIDDEN, seed)[1]
        assert np.abs(flat(a) - flat(p)).max() < 1e-6


def drift(state, out):
    anchor = state.cluster_models[0].flatten()
    return [np.linalg.norm(w.flatten() - anchor) for w in out.client_weights]


def test_large_mu_reduces_drift():
    cfg, clients, state = start("fedprox", prox_mu=100.0)
    lr = TrainConfig(learning_rate=0.005)
    prox = drift(state, fedprox_round(state, clients, cfg, lr, seed=0))
    avg = drift(state, fedavg_round(state, clients, cfg, lr, seed=0))
    assert all(p < a for p, a in zip(prox, avg))


def test_fedprox_requires_positive_mu():
    cfg, clients, state = start("fedprox", prox_mu=0.0)
    with pytest.raises(ValueError):
        fedprox_round(state, clients, cfg, TrainConfig(), seed=0)


def test_fedper_full_split_is_fedavg():
    for seed in range(3):
        total = len(HIDDEN) + 1
        hist_p, sp, _ = run_experiment(FedConfig(client_count=3, rounds=4, strategy="fedper", fedper_split=total),
                                       TrainConfig(), DATA, HIDDEN, seed)
        hist_a, sa, _ = run_experiment(FedConfig(client_count=3, rounds=4, strategy="fedavg"),
                                       TrainConfig(), DATA, HIDDEN, seed)
        assert flat(sp).tobytes() == flat(sa).tobytes()
        assert [r["weighted_accuracy"] for r in hist_p] == [r["weighted_accuracy"] for r in hist_a]


def test_fedper_split_one_keeps_deep_layers():
    cfg, clients, state = start("fedper", k=2, fedper_split=1)
    assert state.shared_counts == [1.0]
    out = fedper_round(state, clients, cfg, TrainConfig(), seed=0)
    for i in range(2):
        model = out.client_weights[i]
        composed = client_model(out, i)
        for k in (1, 2):
            assert composed.weights[k].tobytes() == model.weights[k].tobytes()
    assert out.shared_counts == [1.0]


def test_fedper_split_defaults_and_bounds():
    assert fedper_split(FedConfig(), 4) == 3
    with pytest.raises(ValueError):
        fedper_split(FedConfig(fedper_split=5), 4)
    with pytest.raises(ValueError):
        fedper_split(FedConfig(fedper_split=0), 4)


def test_strategy_spec_validation():
    StrategySpec("fedavg").validate(4)
    StrategySpec("fedprox", prox_mu=0.01).validate(4)
    StrategySpec("fedper", fixed_split=2).validate(4)
    for bad in (StrategySpec("fedavg", prox_mu=0.1), StrategySpec("fedprox"), StrategySpec("fedper"),
                StrategySpec("fedper", fixed_split=5), StrategySpec("ditto")):
        with pytest.raises(ValueError):
            bad.validate(4)


def test_paired_runs_share_data():
    a = setup(FedConfig(client_count=3, strategy="fedavg"), DATA, HIDDEN, 7)
    b = setup(FedConfig(client_count=3, strategy="fedper"), DATA, HIDDEN, 7)
    for ca, cb in zip(a[0], b[0]):
        assert ca.train.features.tobytes() == cb.train.features.tobytes()
    assert a[1].cluster_models[0].flatten().tobytes() == b[1].cluster_models[0].flatten().tobytes()


def test_fedper_beats_fedavg_on_two_concept_task():
    wins = sum(final_accuracy("shards", "fedper", s) > final_accuracy("shards", "fedavg", s) for s in SEEDS)
    assert wins >= 7
