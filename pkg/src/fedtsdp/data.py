"""Synthetic concept-shift data, client partitioning and the public pool."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PartitionError(RuntimeError):
    pass


MAX_PARTITION_RETRIES = 10


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be N x F with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass
class PublicPool:
    features: np.ndarray
    sampling_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.sampling_weights is None:
            m = len(self.features)
            self.sampling_weights = np.full(m, 1.0 / m)
        self.sampling_weights = np.asarray(self.sampling_weights, dtype=float)
        if self.sampling_weights.shape != (len(self.features),):
            raise ValueError("one sampling weight per public example is required")
        if np.any(self.sampling_weights < 0):
            raise ValueError("sampling weights must be nonnegative")

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"
    client_count: int = 2
    beta: float | None = None
    classes_per_client: int | None = None
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet", "shards"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.client_count < 1:
            raise ValueError("client_count must be >= 1")
        if self.scheme == "dirichlet" and not (self.beta is not None and self.beta > 0):
            raise ValueError("dirichlet partition needs beta > 0")
        if self.scheme == "shards" and not (self.classes_per_client and self.classes_per_client >= 1):
            raise ValueError("shards partition needs classes_per_client >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")


def concept_means(concepts: int, classes: int, features: int, rng: np.random.Generator,
                  separation: float = 4.0) -> np.ndarray:
    """Class means per concept, shape (G, C, F).

    A base layout of C random means is shared; concept g cyclically shifts
    which class sits at which mean, so the same region carries a different
    label under each concept. Concepts beyond C also get a random rotation.
    """
    base = rng.normal(size=(classes, features))
    base *= separation / np.linalg.norm(base, axis=1, keepdims=True)
    out = np.empty((concepts, classes, features))
    for g in range(concepts):
        layout = np.roll(base, -g, axis=0)
        if g >= classes:
            q, r = np.linalg.qr(rng.normal(size=(features, features)))
            layout = layout @ (q * np.sign(np.diag(r))).T
        out[g] = layout
    return out


def generate_synthetic(concepts: int, classes: int, features: int, per_class: int,
                       rng: np.random.Generator, separation: float = 4.0) -> list[LabeledDataset]:
    """One dataset per concept: ``per_class`` unit-variance points around each class mean."""
    if concepts < 1 or classes < 2 or per_class < 1 or features < 1:
        raise ValueError("need concepts >= 1, classes >= 2, features >= 1, per_class >= 1")
    means = concept_means(concepts, classes, features, rng, separation)
    out = []
    labels = np.repeat(np.arange(classes), per_class)
    for g in range(concepts):
        x = means[g][labels] + rng.normal(size=(len(labels), features))
        out.append(LabeledDataset(x, labels.copy(), classes))
    return out


def load_csv(path, class_count: int | None = None) -> LabeledDataset:
    """Header row, feature columns, then an integer label column."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one data row")
    body = [r for r in rows[1:] if r]
    width = len(rows[0])
    if width < 2 or any(len(r) != width for r in body):
        raise ValueError(f"{path}: every row must have {width} columns")
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    return LabeledDataset(x, y, int(y.max()) + 1 if class_count is None else class_count)


def _split_train_test(data: LabeledDataset, idx: np.ndarray, test_fraction: float, rng):
    idx = rng.permutation(idx)
    n_test = min(int(round(len(idx) * test_fraction)), len(idx) - 1)
    return data.subset(np.sort(idx[n_test:])), data.subset(np.sort(idx[:n_test]))


def _iid_shards(data, spec, rng):
    return np.array_split(rng.permutation(len(data)), spec.client_count)


def _dirichlet_shards(data, spec, rng):
    k = spec.client_count
    shards = [[] for _ in range(k)]
    for c in range(data.class_count):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        props = rng.dirichlet(np.full(k, spec.beta))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for i, part in enumerate(np.split(idx, cuts)):
            shards[i].extend(part.tolist())
    return [np.array(s, dtype=np.int64) for s in shards]


def _class_shards(data, spec, rng):
    k, per, n_cls = spec.client_count, spec.classes_per_client, data.class_count
    present = [c for c in range(n_cls) if np.any(data.labels == c)]
    if per > len(present):
        raise PartitionError(f"classes_per_client={per} exceeds the {len(present)} classes present")
    if k * per < len(present):
        raise PartitionError(f"{k} clients x {per} classes cannot cover {len(present)} classes")
    order = rng.permutation(present)
    owned = [[order[(i * per + j) % len(order)] for j in range(per)] for i in range(k)]
    shards = [[] for _ in range(k)]
    for c in present:
        holders = [i for i in range(k) if c in owned[i]]
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        for i, part in zip(holders, np.array_split(idx, len(holders))):
            shards[i].extend(part.tolist())
    return [np.array(s, dtype=np.int64) for s in shards]


_SCHEMES = {"iid": _iid_shards, "dirichlet": _dirichlet_shards, "shards": _class_shards}


def partition(data: LabeledDataset, spec: PartitionSpec, rng: np.random.Generator):
    """Split ``data`` into ``spec.client_count`` disjoint (train, test) pairs."""
    for _ in range(MAX_PARTITION_RETRIES):
        shards = _SCHEMES[spec.scheme](data, spec, rng)
        if all(len(s) >= 1 for s in shards):
            return [_split_train_test(data, s, spec.test_fraction, rng) for s in shards]
    raise PartitionError(
        f"{spec.scheme} partition left a client empty after {MAX_PARTITION_RETRIES} draws")


def sample_public_batch(pool: PublicPool, batch_size: int, rng: np.random.Generator):
    """Weighted draw without replacement, renormalizing after each pick."""
    m = len(pool)
    if batch_size > m:
        raise ValueError(f"public batch of {batch_size} exceeds pool size {m}")
    w = pool.sampling_weights.astype(float).copy()
    picked = np.empty(batch_size, dtype=np.int64)
    for t in range(batch_size):
        total = w.sum()
        if total <= 0:
            # all remaining mass is zero: fall back to uniform over what is left
            w = np.where(w == 0, 1.0, 0.0)
            w[picked[:t]] = 0.0
            total = w.sum()
        cdf = np.cumsum(w)
        k = int(np.searchsorted(cdf, rng.random() * total, side="right"))
        k = min(k, m - 1)
        while w[k] == 0:  # guard against landing on a zero-width bin at the edge
            k -= 1
        picked[t] = k
        w[k] = 0.0
    return picked, pool.features[picked]


def update_sampling_weights(pool: PublicPool, batch_indices) -> PublicPool:
    """Boost the batch entries by |pool| / |batch|, then renormalize."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("batch indices must be unique")
    if len(idx) == 0 or idx.min() < 0 or idx.max() >= len(pool):
        raise ValueError("batch indices out of range")
    w = pool.sampling_weights.copy()
    w[idx] += len(pool) / len(idx)
    return PublicPool(pool.features, w / w.sum())


@dataclass(frozen=True)
class DataSpec:
    scheme: str = "iid"
    beta: float | None = None
    classes_per_client: int | None = None
    concepts: int = 1
    classes: int = 10
    features: int = 20
    per_class: int = 100
    public_per_class: int = 20
    separation: float = 4.0
    test_fraction: float = 0.2
    csv_path: str | None = None

    def partition_spec(self, client_count: int) -> PartitionSpec:
        return PartitionSpec(self.scheme, client_count, self.beta,
                             self.classes_per_client, self.test_fraction)


@dataclass
class Client:
    cid: int
    train: LabeledDataset
    test: LabeledDataset
    concept: int = 0

    @property
    def n(self) -> int:
        return len(self.train)


def _split_off_public(data: LabeledDataset, per_class: int, rng):
    pub, keep = [], []
    for c in range(data.class_count):
        idx = rng.permutation(np.flatnonzero(data.labels == c))
        pub.extend(idx[:per_class].tolist())
        keep.extend(idx[per_class:].tolist())
    return data.subset(np.sort(keep)), data.features[np.sort(pub)]


def build_federation(spec: DataSpec, client_count: int, rng: np.random.Generator):
    """Clients (contiguous blocks per concept) and the unlabeled public pool."""
    if spec.csv_path:
        datasets = [load_csv(spec.csv_path)]
    else:
        datasets = generate_synthetic(spec.concepts, spec.classes, spec.features,
                                      spec.per_class + spec.public_per_class, rng, spec.separation)
    if client_count < len(datasets):
        raise ValueError(f"{client_count} clients cannot cover {len(datasets)} concepts")
    blocks = np.array_split(np.arange(client_count), len(datasets))
    clients, public = [], []
    for g, (data, block) in enumerate(zip(datasets, blocks)):
        train_part, pub = _split_off_public(data, spec.public_per_class, rng)
        public.append(pub)
        for cid, (tr, te) in zip(block, partition(train_part, spec.partition_spec(len(block)), rng)):
            clients.append(Client(int(cid), tr, te, g))
    return clients, PublicPool(np.concatenate(public))
