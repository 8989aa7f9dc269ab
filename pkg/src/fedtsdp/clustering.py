"""DBSCAN on precomputed distances and the two-stage client grouping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .divergence import SimilarityMatrix, similarity_matrix, weight_distance_matrix


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    min_pts: int = 2

    def __post_init__(self):
        if not (self.eps > 0 and np.isfinite(self.eps)):
            raise ValueError(f"eps must be finite and > 0, got {self.eps}")
        if int(self.min_pts) != self.min_pts or self.min_pts < 1:
            raise ValueError(f"min_pts must be an integer >= 1, got {self.min_pts}")


@dataclass
class ClusterAssignment:
    first_stage: list[list[int]]
    second_stage: list[list[int]]
    round_formed: int = 0
    parent: list[int] = field(default_factory=list)  # first-stage index of each second-stage cluster

    def __post_init__(self):
        if not self.parent:
            self.parent = [_owner(self.first_stage, c[0]) for c in self.second_stage]

    @classmethod
    def single(cls, members, round_formed: int = 0) -> "ClusterAssignment":
        members = sorted(members)
        return cls([members], [list(members)], round_formed, [0])

    def cluster_of(self) -> dict[int, int]:
        return {i: j for j, c in enumerate(self.second_stage) for i in c}


def _owner(groups, i):
    for j, g in enumerate(groups):
        if i in g:
            return j
    raise ValueError(f"client {i} is in no first-stage group")


def _values(dist):
    return dist.values if isinstance(dist, SimilarityMatrix) else np.asarray(dist, dtype=float)


def dbscan(dist, params: DbscanParams) -> list[list[int]]:
    """DBSCAN over a precomputed symmetric distance matrix.

    Neighbourhoods are closed balls (d <= eps) that include the point itself.
    Border points join the cluster of their lowest-index core neighbour;
    noise points come back as singletons. Clusters are ordered by their
    smallest member.
    """
    d = _values(dist)
    m = len(d)
    if d.shape != (m, m):
        raise ValueError("distance matrix must be square")
    if not np.allclose(d, d.T, atol=1e-9, rtol=0):
        raise ValueError("distance matrix is not symmetric")
    near = d <= params.eps
    np.fill_diagonal(near, True)
    core = near.sum(axis=1) >= params.min_pts

    label = np.full(m, -1)
    n_clusters = 0
    for i in range(m):
        if not core[i] or label[i] >= 0:
            continue
        label[i] = n_clusters
        stack = [i]
        while stack:
            p = stack.pop()
            for q in np.flatnonzero(near[p] & core):
                if label[q] < 0:
                    label[q] = n_clusters
                    stack.append(q)
        n_clusters += 1
    for i in range(m):
        if not core[i]:
            hits = np.flatnonzero(near[i] & core)
            if len(hits):
                label[i] = label[hits[0]]

    groups: dict[int, list[int]] = {}
    out = []
    for i in range(m):
        if label[i] < 0:
            out.append([i])
        else:
            groups.setdefault(label[i], []).append(i)
    out.extend(groups.values())
    return sorted(out, key=lambda g: g[0])


def two_stage_cluster(profiles, weights, params1: DbscanParams, params2: DbscanParams,
                      upsilon: float = 1e-12, js_variant: str = "textbook",
                      round_formed: int = 0) -> ClusterAssignment:
    """Group by inference similarity, then split each group by weight distance.

    Indices in the result are positions in ``profiles``/``weights``.
    """
    if len(profiles) != len(weights):
        raise ValueError(f"{len(profiles)} profiles but {len(weights)} weight sets")
    if len(profiles) < 2:
        raise ValueError("two_stage_cluster needs at least two clients")
    first = dbscan(similarity_matrix(profiles, js_variant), params1)
    second, parent = [], []
    for j, group in enumerate(first):
        if len(group) == 1:
            parts = [group]
        else:
            sub = weight_distance_matrix([weights[i] for i in group], upsilon)
            parts = [[group[k] for k in p] for p in dbscan(sub, params2)]
        second.extend(parts)
        parent.extend([j] * len(parts))
    return ClusterAssignment(first, second, round_formed, parent)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected pair agreement between two labelings."""
    a = np.unique(np.asarray(labels_a), return_inverse=True)[1]
    b = np.unique(np.asarray(labels_b), return_inverse=True)[1]
    if len(a) != len(b):
        raise ValueError("labelings differ in length")
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)

    def pairs(x):
        return (x * (x - 1) / 2).sum()

    total = pairs(np.array([len(a)]))
    index = pairs(table)
    ra, rb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = ra * rb / total if total else 0.0
    top = 0.5 * (ra + rb)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def labels_from_groups(groups, members=None) -> list[int]:
    """Turn a list of index groups into a label per member (sorted members)."""
    lookup = {i: j for j, g in enumerate(groups) for i in g}
    members = sorted(lookup) if members is None else members
    return [lookup[i] for i in members]
