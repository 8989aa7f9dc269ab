"""FedAvg, FedProx and FedPer rounds on the same client/aggregation plumbing."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .nn_core import TrainConfig
from .orchestrator import FedConfig, RoundState, _aggregate, _record, _train_selected, select_clients


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    prox_mu: float = 0.0
    fixed_split: int | None = None

    def validate(self, total_layers: int):
        if self.kind not in ("fedavg", "fedprox", "fedper"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if (self.prox_mu > 0) != (self.kind == "fedprox"):
            raise ValueError("prox_mu > 0 exactly when kind is fedprox")
        if self.kind == "fedper" and not (self.fixed_split and 1 <= self.fixed_split <= total_layers):
            raise ValueError(f"fedper needs 1 <= fixed_split <= {total_layers}")


def fedper_split(cfg: FedConfig, total_layers: int) -> int:
    split = total_layers - 1 if cfg.fedper_split is None else cfg.fedper_split
    if not 1 <= split <= total_layers:
        raise ValueError(f"fedper_split must lie in [1, {total_layers}], got {split}")
    return split


def _shared_round(state: RoundState, clients, cfg: FedConfig, train_cfg: TrainConfig, seed: int,
                  prox: bool) -> RoundState:
    r = state.round + 1
    selected = select_clients(cfg, seed, r)
    uploads = _train_selected(state, clients, selected, train_cfg, seed, r, prox=prox)
    state = _aggregate(state, clients, uploads)
    return _record(replace(state, round=r), clients, None, False)


def fedavg_round(state: RoundState, clients, cfg: FedConfig, train_cfg: TrainConfig, seed: int) -> RoundState:
    """Every client trains the full global model; the server takes the n_i-weighted mean."""
    return _shared_round(state, clients, cfg, replace(train_cfg, prox_mu=0.0), seed, prox=False)


def fedprox_round(state: RoundState, clients, cfg: FedConfig, train_cfg: TrainConfig, seed: int) -> RoundState:
    """FedAvg with a proximal pull toward the round's global weights."""
    if cfg.prox_mu <= 0:
        raise ValueError("fedprox needs prox_mu > 0")
    return _shared_round(state, clients, cfg, replace(train_cfg, prox_mu=cfg.prox_mu), seed, prox=True)


def fedper_round(state: RoundState, clients, cfg: FedConfig, train_cfg: TrainConfig, seed: int) -> RoundState:
    # the split is fixed at setup; only the leading base layers are averaged
    split = state.shared_counts[0]
    if split != math.floor(split):
        raise ValueError("fedper needs an integral split point")
    return _shared_round(state, clients, cfg, replace(train_cfg, prox_mu=0.0), seed, prox=False)
