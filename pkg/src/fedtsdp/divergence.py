"""Divergences between inference profiles, Hopkins tendency, weight distance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import LayeredWeights, ShapeError

EPS = 1e-12
LN2 = math.log(2.0)
JS_VARIANTS = ("textbook", "as_printed")


class DomainError(ValueError):
    pass


def _as_prob(p, tol=1e-6):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < -tol) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > tol:
        raise DomainError("expected a probability vector (nonnegative, summing to 1)")
    return np.clip(p, 0.0, None)


def _kl_rows(p, q):
    # sum over the last axis; p == 0 terms contribute nothing
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p + EPS) - np.log(q + EPS)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _js_rows(p, q, variant="textbook"):
    mid = 0.5 * (p + q)
    if variant == "textbook":
        return 0.5 * _kl_rows(p, mid) + 0.5 * _kl_rows(q, mid)
    if variant == "as_printed":
        return 0.5 * _kl_rows(p, mid) + 0.5 * _kl_rows(mid, q)
    raise ValueError(f"unknown JS variant {variant!r}; choose from {JS_VARIANTS}")


def kl_divergence(p, q) -> float:
    """KL(p || q) with an epsilon floor inside the logarithms."""
    p, q = _as_prob(p), _as_prob(q)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    return float(_kl_rows(p, q))


def js_divergence(p, q, variant: str = "textbook") -> float:
    """Jensen-Shannon divergence through the midpoint distribution.

    ``variant="as_printed"`` uses KL(mid || q) for the second half instead
    of KL(q || mid); that form is not symmetric.
    """
    p, q = _as_prob(p), _as_prob(q)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {q.shape}")
    return float(_js_rows(p, q, variant))


@dataclass
class InferenceProfile:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise ShapeError("profile must be B x C")
        if np.any(self.probs < -1e-12) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-9):
            raise DomainError("profile rows must be probability vectors")

    @property
    def flat(self) -> np.ndarray:
        return self.probs.ravel()


def profile_js(a: InferenceProfile, b: InferenceProfile, variant: str = "textbook") -> float:
    """Row-wise JS divergence averaged over the public batch."""
    if a.probs.shape != b.probs.shape:
        raise ShapeError(f"profile shapes differ: {a.probs.shape} vs {b.probs.shape}")
    return float(_js_rows(a.probs, b.probs, variant).mean())


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    kind: str = "js"

    def __len__(self):
        return len(self.values)


def similarity_matrix(profiles, variant: str = "textbook") -> SimilarityMatrix:
    if len(profiles) < 2:
        raise ValueError("similarity_matrix needs at least two profiles")
    m = len(profiles)
    vals = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            vals[i, j] = vals[j, i] = profile_js(profiles[i], profiles[j], variant)
    return SimilarityMatrix(vals, "js")


@dataclass(frozen=True)
class HopkinsConfig:
    sample_count: int | None = None  # None -> max(2, m // 4)
    threshold: float = 0.65

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("Hopkins threshold must lie in (0, 1)")
        if self.sample_count is not None and self.sample_count < 2:
            raise ValueError("Hopkins sample_count must be >= 2")

    def resolve(self, m: int) -> int:
        n = max(2, m // 4) if self.sample_count is None else self.sample_count
        if not 2 <= n <= m - 1:
            raise ValueError(f"Hopkins sample count {n} must lie in [2, {m - 1}] for m={m}")
        return n


def hopkins_statistic(flats, cfg: HopkinsConfig, rng: np.random.Generator) -> float:
    """sum(z) / (sum(z) + sum(v)) with L2 nearest-neighbour distances.

    z: from points drawn uniformly in the data's bounding box to the data;
    v: from sampled data points to their nearest other data point.
    """
    x = np.asarray(flats, dtype=float)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("hopkins_statistic needs m >= 3 vectors of equal dimension")
    m = len(x)
    n = cfg.resolve(m)
    chosen = rng.choice(m, size=n, replace=False)
    lo, hi = x.min(axis=0), x.max(axis=0)
    probes = rng.uniform(lo, hi, size=(n, x.shape[1]))

    z = np.sqrt(((probes[:, None, :] - x[None, :, :]) ** 2).sum(-1)).min(axis=1)
    d = np.sqrt(((x[chosen][:, None, :] - x[None, :, :]) ** 2).sum(-1))
    d[np.arange(n), chosen] = np.inf
    v = d.min(axis=1)

    total = z.sum() + v.sum()
    if total == 0:
        return 0.5
    return float(z.sum() / total)


def weight_distance(a: LayeredWeights, b: LayeredWeights, upsilon: float = 1e-12,
                    n_layers: int | None = None) -> float:
    """|| w_a - w_b + upsilon * 1 ||_2 over the shared layers.

    The shared block is the first ceil(min split point) layers unless
    ``n_layers`` is given.
    """
    if not a.same_shape(b):
        raise ShapeError("weight_distance: architectures differ")
    if n_layers is None:
        n_layers = int(math.ceil(min(a.split_point, b.split_point)))
    diff = a.flatten(n_layers) - b.flatten(n_layers)
    return float(np.linalg.norm(diff + upsilon))


def weight_distance_matrix(models, upsilon: float = 1e-12) -> SimilarityMatrix:
    m = len(models)
    vals = np.zeros((m, m))
    for i in range(m):
        vals[i, i] = weight_distance(models[i], models[i], upsilon)
        for j in range(i + 1, m):
            vals[i, j] = vals[j, i] = weight_distance(models[i], models[j], upsilon)
    return SimilarityMatrix(vals, "weight_l2")
