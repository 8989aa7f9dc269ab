"""Server loop for two-stage decoupled clustered FL with adaptive sharing.

Each round: clients start from their cluster's shared layers plus their own
personalized layers, train locally, and upload full weights. The server
scores the uploads' inferences on a weighted public batch; when the Hopkins
statistic clears the threshold it re-clusters (inference JS, then weight
distance), boosts the batch's sampling weights and shrinks every cluster's
shared-layer count. Aggregation then runs within the current clusters.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import ClusterAssignment, DbscanParams, two_stage_cluster
from .data import Client, DataSpec, PublicPool, build_federation, sample_public_batch, update_sampling_weights
from .divergence import HopkinsConfig, InferenceProfile, hopkins_statistic
from .nn_core import LayeredWeights, TrainConfig, forward, init_weights, local_train, predict, softmax_rows
from .seeding import stream

STRATEGIES = ("fedtsd", "fedavg", "fedprox", "fedper")


class AggregationError(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FedConfig:
    client_count: int = 20
    connect_ratio: float = 1.0
    rounds: int = 200
    hopkins: HopkinsConfig = HopkinsConfig()
    dbscan1: DbscanParams = DbscanParams(0.15, 2)
    dbscan2: DbscanParams = DbscanParams(3.5, 2)
    dampening: float = 0.98
    public_batch: int = 50
    initial_shared_layers: float | None = None  # None: every layer starts shared
    strategy: str = "fedtsd"
    upsilon: float = 1e-12
    js_variant: str = "textbook"
    shared_floor: float = 1.0
    prox_mu: float = 0.01
    fedper_split: int | None = None  # None: all but the output layer

    def __post_init__(self):
        if self.client_count < 1:
            raise ValueError("client_count must be >= 1")
        if not 0 < self.connect_ratio <= 1:
            raise ValueError(f"connect_ratio must be in (0, 1], got {self.connect_ratio}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not 0 < self.dampening <= 1:
            raise ValueError(f"dampening must be in (0, 1], got {self.dampening}")
        if self.public_batch < 1:
            raise ValueError("public_batch must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")

    @property
    def connected(self) -> int:
        return max(int(math.floor(self.connect_ratio * self.client_count)), 1)


@dataclass
class RoundState:
    round: int
    assignment: ClusterAssignment
    cluster_models: list[LayeredWeights]
    shared_counts: list[float]
    client_weights: list[LayeredWeights]
    pool: PublicPool
    history: list[dict] = field(default_factory=list)


def init_state(global_model: LayeredWeights, client_count: int, pool: PublicPool,
               shared: float | None = None) -> RoundState:
    s = float(global_model.total_layers if shared is None else shared)
    if not 0 <= s <= global_model.total_layers:
        raise ValueError(f"initial shared layers {s} outside [0, {global_model.total_layers}]")
    model = replace(global_model.copy(), split_point=s)
    return RoundState(0, ClusterAssignment.single(range(client_count)), [model], [s],
                      [model.copy() for _ in range(client_count)], pool)


def compose(shared_src: LayeredWeights, own: LayeredWeights, shared_count: float) -> LayeredWeights:
    """Cluster layers below floor(s), a frac(s) blend at the boundary, own layers after."""
    full = int(math.floor(shared_count))
    frac = shared_count - full
    weights, biases = [], []
    for k in range(own.total_layers):
        if k < full:
            weights.append(shared_src.weights[k].copy())
            biases.append(shared_src.biases[k].copy())
        elif k == full and frac > 0:
            weights.append(frac * shared_src.weights[k] + (1 - frac) * own.weights[k])
            biases.append(frac * shared_src.biases[k] + (1 - frac) * own.biases[k])
        else:
            weights.append(own.weights[k].copy())
            biases.append(own.biases[k].copy())
    return LayeredWeights(weights, biases, shared_count)


def weighted_average(models, sizes, n_layers: int | None = None,
                     base: LayeredWeights | None = None) -> LayeredWeights:
    """sum_i (n_i / n) w_i over the first ``n_layers`` layers; the rest come from ``base``."""
    sizes = np.asarray(sizes, dtype=float)
    total = sizes.sum()
    if total <= 0:
        raise AggregationError("cannot aggregate a cluster with zero total data size")
    coef = sizes / total
    n = models[0].total_layers if n_layers is None else n_layers
    base = models[0] if base is None else base
    weights, biases = [], []
    for k in range(models[0].total_layers):
        if k < n:
            w = coef[0] * models[0].weights[k]
            b = coef[0] * models[0].biases[k]
            for c, m in zip(coef[1:], models[1:]):
                w = w + c * m.weights[k]
                b = b + c * m.biases[k]
        else:
            w, b = base.weights[k].copy(), base.biases[k].copy()
        weights.append(w)
        biases.append(b)
    return LayeredWeights(weights, biases, base.split_point)


def aggregate_cluster(members, shared_count: float) -> list[LayeredWeights]:
    """Aggregate (weights, n_i) pairs and hand each member its post-aggregation model."""
    if not members:
        raise AggregationError("empty cluster")
    models = [w for w, _ in members]
    avg = weighted_average(models, [n for _, n in members], int(math.ceil(shared_count)))
    return [compose(avg, w, shared_count) for w in models]


def decay_shared_layers(state: RoundState, psi: float, round_idx: int, floor: float = 1.0) -> RoundState:
    counts = [max(floor, s * psi ** round_idx) if s > floor else s for s in state.shared_counts]
    return replace(state, shared_counts=counts)


def select_clients(cfg: FedConfig, seed: int, round_idx: int) -> list[int]:
    m = cfg.connected
    if m >= cfg.client_count:
        return list(range(cfg.client_count))
    return sorted(stream(seed, "select", round_idx).choice(cfg.client_count, m, replace=False).tolist())


def client_model(state: RoundState, i: int) -> LayeredWeights:
    j = state.assignment.cluster_of()[i]
    return compose(state.cluster_models[j], state.client_weights[i], state.shared_counts[j])


def evaluate(state: RoundState, clients: list[Client]):
    """Per-client test accuracy of (cluster shared + own personal) layers, and the n_i-weighted mean."""
    accs = []
    for c in clients:
        if len(c.test) == 0:
            raise EvaluationError(f"client {c.cid} has an empty test set")
        pred = predict(client_model(state, c.cid), c.test.features)
        accs.append(float((pred == c.test.labels).mean()))
    sizes = np.array([c.n for c in clients], dtype=float)
    return accs, float(np.dot(sizes, accs) / sizes.sum())


def _train_selected(state, clients, selected, train_cfg, seed, r, prox=False):
    uploads = {}
    for i in selected:
        start = client_model(state, i)
        uploads[i] = local_train(start, clients[i].train, train_cfg, r,
                                 stream(seed, "client", i, r), start if prox else None)
    return uploads


def _aggregate(state, clients, uploads):
    models = list(state.cluster_models)
    for j, members in enumerate(state.assignment.second_stage):
        present = [i for i in members if i in uploads]
        if not present:
            continue
        n_layers = int(math.ceil(state.shared_counts[j]))
        agg = weighted_average([uploads[i] for i in present], [clients[i].n for i in present],
                               n_layers, base=models[j])
        agg.split_point = state.shared_counts[j]
        models[j] = agg
    weights = list(state.client_weights)
    for i, w in uploads.items():
        weights[i] = w
    return replace(state, cluster_models=models, client_weights=weights)


def _recluster(state: RoundState, selected, local: ClusterAssignment, r: int) -> RoundState:
    """Install a clustering of the selected clients, keeping lineage for the rest."""
    old = state.assignment
    old_of = old.cluster_of()
    second = [[selected[k] for k in g] for g in local.second_stage]
    first = [[selected[k] for k in g] for g in local.first_stage]
    parent = list(local.parent)

    models, counts = [], []
    for g in second:
        votes = np.bincount([old_of[i] for i in g], minlength=len(old.second_stage))
        src = int(np.argmax(votes))  # ties -> lowest old id
        models.append(state.cluster_models[src].copy())
        counts.append(state.shared_counts[src])

    chosen = set(selected)
    n_new = len(second)
    for oj, members in enumerate(old.second_stage):
        rest = [i for i in members if i not in chosen]
        if not rest:
            continue
        overlap = [len(set(members) & set(g)) for g in second[:n_new]]
        k = int(np.argmax(overlap))
        if overlap[k] > 0:
            second[k].extend(rest)
            first[parent[k]].extend(rest)
        else:
            second.append(rest)
            first.append(list(rest))
            parent.append(len(first) - 1)
            models.append(state.cluster_models[oj].copy())
            counts.append(state.shared_counts[oj])
    assignment = ClusterAssignment([sorted(g) for g in first], [sorted(g) for g in second], r, parent)
    return replace(state, assignment=assignment, cluster_models=models, shared_counts=counts)


def run_round(state: RoundState, clients: list[Client], cfg: FedConfig, train_cfg: TrainConfig,
              seed: int) -> RoundState:
    r = state.round + 1
    selected = select_clients(cfg, seed, r)
    uploads = _train_selected(state, clients, selected, train_cfg, seed, r)
    for i in selected:
        uploads[i].split_point = state.shared_counts[state.assignment.cluster_of()[i]]

    batch_idx, batch = sample_public_batch(state.pool, cfg.public_batch, stream(seed, "public", r))
    profiles = [InferenceProfile(softmax_rows(forward(uploads[i], batch)[0])) for i in selected]

    h = None
    if len(selected) >= 3:
        h = hopkins_statistic([p.flat for p in profiles], cfg.hopkins, stream(seed, "hopkins", r))
    fired = h is not None and h > cfg.hopkins.threshold

    if fired:
        local = two_stage_cluster(profiles, [uploads[i] for i in selected], cfg.dbscan1, cfg.dbscan2,
                                  cfg.upsilon, cfg.js_variant, r)
        state = _recluster(state, selected, local, r)
        state = replace(state, pool=update_sampling_weights(state.pool, batch_idx))

    state = _aggregate(state, clients, uploads)
    if fired:
        state = decay_shared_layers(state, cfg.dampening, r, cfg.shared_floor)
    return _record(replace(state, round=r), clients, h, fired)


def _record(state: RoundState, clients, h, fired, wall_ms: float | None = None) -> RoundState:
    accs, weighted = evaluate(state, clients)
    rec = {
        "round": state.round,
        "hopkins_H": h,
        "gate_fired": bool(fired),
        "cluster_count": len(state.assignment.second_stage),
        "clusters": [list(map(int, g)) for g in state.assignment.second_stage],
        "shared_counts": [float(s) for s in state.shared_counts],
        "client_accuracy": accs,
        "weighted_accuracy": weighted,
    }
    if wall_ms is not None:
        rec["wall_ms"] = wall_ms
    return replace(state, history=state.history + [rec])


def round_function(cfg: FedConfig):
    from . import baselines

    return {
        "fedtsd": run_round,
        "fedavg": baselines.fedavg_round,
        "fedprox": baselines.fedprox_round,
        "fedper": baselines.fedper_round,
    }[cfg.strategy]


def initial_shared(cfg: FedConfig, total_layers: int) -> float:
    from .baselines import fedper_split

    if cfg.strategy == "fedper":
        return float(fedper_split(cfg, total_layers))
    if cfg.strategy in ("fedavg", "fedprox") or cfg.initial_shared_layers is None:
        return float(total_layers)
    return float(cfg.initial_shared_layers)


def setup(cfg: FedConfig, data: DataSpec, hidden, seed: int):
    """Build clients, public pool and the round-0 state."""
    clients, pool = build_federation(data, cfg.client_count, stream(seed, "data"))
    n_classes = clients[0].train.class_count
    widths = [clients[0].train.features.shape[1], *hidden, n_classes]
    model = init_weights(widths, stream(seed, "init"))
    state = init_state(model, cfg.client_count, pool, initial_shared(cfg, model.total_layers))
    return clients, state


def run_experiment(cfg: FedConfig, train_cfg: TrainConfig, data: DataSpec, hidden, seed: int,
                   timing: bool = False, on_round=None):
    """Run ``cfg.rounds`` rounds of the configured strategy; returns (history, final state)."""
    clients, state = setup(cfg, data, hidden, seed)
    step = round_function(cfg)
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        state = step(state, clients, cfg, train_cfg, seed)
        if timing:
            state.history[-1]["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        if on_round is not None:
            on_round(state.history[-1])
    return state.history, state, clients
