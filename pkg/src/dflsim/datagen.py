"""Synthetic classification data and non-IID client partitioning.

Data is a Gaussian mixture: each class gets a seeded random mean of norm
``spread`` and unit covariance, with a stratified 80/20 train/test split.
Two partition schemes skew labels across clients: per-class Dirichlet
proportions, and disjoint class shards. Per-client test indices mirror
each client's train label distribution so evaluation is personalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_MIN_SAMPLES = 10
DEFAULT_MAX_RETRIES = 100


@dataclass(eq=False)
class SyntheticDataset:
    """Feature matrix plus labels with a boolean train mask.

    Test rows are exactly the rows where ``train_mask`` is false, so the
    two splits are disjoint and exhaustive by construction.
    """

    features: np.ndarray  # (n, input_dim)
    labels: np.ndarray  # (n,) ints in [0, num_classes)
    num_classes: int
    train_mask: np.ndarray  # (n,) bool

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be 2-d")
        if self.labels.shape != (n,) or self.train_mask.shape != (n,):
            raise ValueError("labels and train_mask must match feature rows")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        present = np.unique(self.labels)
        if len(present) != self.num_classes:
            raise ValueError("every class must be present")

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.train_mask)


@dataclass(eq=False)
class ClientSplit:
    """One client's view: train indices it owns, test indices it is scored on."""

    train_indices: np.ndarray
    test_indices: np.ndarray

    def __post_init__(self):
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        self.test_indices = np.asarray(self.test_indices, dtype=np.int64)

    @property
    def n_samples(self) -> int:
        return int(self.train_indices.size)


@dataclass(eq=False)
class Partition:
    """Per-client index assignment; train indices are disjoint across clients."""

    clients: list[ClientSplit]

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def split_of(self, client_id: int) -> ClientSplit:
        if not 0 <= client_id < len(self.clients):
            raise KeyError(f"unknown client {client_id}")
        return self.clients[client_id]


def gen_gaussian_mixture(
    num_classes: int, input_dim: int, n_per_class: int, spread: float, seed
) -> SyntheticDataset:
    """Isotropic Gaussian blobs, one per class, stratified 80/20 split."""
    if num_classes < 1 or input_dim < 1 or n_per_class < 1:
        raise ValueError("counts must be positive")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    feats = []
    labels = []
    train_mask = []
    for c in range(num_classes):
        direction = rng.normal(size=input_dim)
        norm = np.linalg.norm(direction)
        while norm < 1e-12:
            direction = rng.normal(size=input_dim)
            norm = np.linalg.norm(direction)
        mean = spread * direction / norm
        feats.append(mean + rng.standard_normal((n_per_class, input_dim)))
        labels.append(np.full(n_per_class, c, dtype=np.int64))
        n_train = int(round(0.8 * n_per_class))
        n_train = min(max(n_train, 1), n_per_class if n_per_class == 1 else n_per_class - 1)
        mask = np.zeros(n_per_class, dtype=bool)
        mask[:n_train] = True
        train_mask.append(mask)
    return SyntheticDataset(
        np.concatenate(feats),
        np.concatenate(labels),
        num_classes,
        np.concatenate(train_mask),
    )


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Split `total` items proportionally to non-negative weights.

    Floors the exact quotas, then hands leftover items to the largest
    fractional remainders; ties go to the lower index. Sums exactly to
    `total`.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    quotas = w / w.sum() * total
    base = np.floor(quotas).astype(np.int64)
    leftover = total - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:leftover]] += 1
    return base


def _class_index_pools(ds: SyntheticDataset):
    """Train and test index arrays grouped by class, in storage order."""
    train, test = [], []
    for c in range(ds.num_classes):
        of_class = ds.labels == c
        train.append(np.flatnonzero(of_class & ds.train_mask))
        test.append(np.flatnonzero(of_class & ~ds.train_mask))
    return train, test


def _deal(pool: np.ndarray, counts: np.ndarray, rng) -> list[np.ndarray]:
    """Shuffle a pool and cut consecutive chunks of the given sizes."""
    if counts.sum() != pool.size:
        raise ValueError("counts must cover the pool exactly")
    shuffled = rng.permutation(pool)
    cuts = np.cumsum(counts)[:-1]
    return [np.sort(chunk) for chunk in np.split(shuffled, cuts)]


def _assemble(
    ds: SyntheticDataset,
    train_counts: np.ndarray,  # (num_classes, M)
    rng,
) -> Partition:
    """Turn per-class per-client train counts into concrete index splits.

    Test indices of each class are split with the same relative shares as
    the client train counts for that class.
    """
    train_pools, test_pools = _class_index_pools(ds)
    m = train_counts.shape[1]
    train_parts = [[] for _ in range(m)]
    test_parts = [[] for _ in range(m)]
    for c in range(ds.num_classes):
        chunks = _deal(train_pools[c], train_counts[c], rng)
        if test_pools[c].size and train_counts[c].sum() > 0:
            test_counts = largest_remainder(train_counts[c], test_pools[c].size)
            t_chunks = _deal(test_pools[c], test_counts, rng)
        else:
            t_chunks = [np.empty(0, dtype=np.int64)] * m
        for i in range(m):
            train_parts[i].append(chunks[i])
            test_parts[i].append(t_chunks[i])
    clients = [
        ClientSplit(np.sort(np.concatenate(train_parts[i])), np.sort(np.concatenate(test_parts[i])))
        for i in range(m)
    ]
    return Partition(clients)


def dirichlet_partition(
    ds: SyntheticDataset,
    clients: int,
    beta: float,
    seed,
    min_samples: int = DEFAULT_MIN_SAMPLES,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> Partition:
    """Label-skewed partition: per-class client proportions ~ Dirichlet(beta).

    Redraws until every client holds at least ``min_samples`` train samples
    and at least one test sample, then deals indices. Smaller beta means
    more skew.
    """
    if clients < 1:
        raise ConfigError("clients must be >= 1")
    if beta <= 0:
        raise ConfigError("beta must be > 0")
    rng = np.random.default_rng(seed)
    train_pools, test_pools = _class_index_pools(ds)
    pool_sizes = np.array([p.size for p in train_pools])
    test_sizes = np.array([p.size for p in test_pools])
    for _ in range(max_retries):
        counts = np.zeros((ds.num_classes, clients), dtype=np.int64)
        for c in range(ds.num_classes):
            props = rng.dirichlet(np.full(clients, beta))
            counts[c] = largest_remainder(props, int(pool_sizes[c]))
        train_totals = counts.sum(axis=0)
        test_totals = np.zeros(clients, dtype=np.int64)
        for c in range(ds.num_classes):
            if test_sizes[c] and counts[c].sum() > 0:
                test_totals += largest_remainder(counts[c], int(test_sizes[c]))
        if train_totals.min() >= min_samples and test_totals.min() >= 1:
            return _assemble(ds, counts, rng)
    raise ConfigError(
        f"could not satisfy min_samples={min_samples} for {clients} clients "
        f"after {max_retries} draws; lower min_samples or raise beta"
    )


def shard_partition(
    ds: SyntheticDataset,
    clients: int,
    classes_per_client: int,
    seed,
    min_samples: int = DEFAULT_MIN_SAMPLES,
) -> Partition:
    """Extreme skew: each client holds samples from a fixed set of classes.

    A seeded class permutation is dealt cyclically, ``classes_per_client``
    entries per client; classes shared by several clients have their
    samples split near-equally and disjointly.
    """
    k = ds.num_classes
    if clients < 1:
        raise ConfigError("clients must be >= 1")
    if classes_per_client < 1:
        raise ConfigError("classes_per_client must be >= 1")
    if classes_per_client > k:
        raise ConfigError(
            f"classes_per_client={classes_per_client} exceeds num_classes={k}"
        )
    if clients * classes_per_client < k:
        raise ConfigError(
            f"{clients} clients x {classes_per_client} classes cannot cover "
            f"{k} classes"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(k)
    holders: list[list[int]] = [[] for _ in range(k)]
    for i in range(clients):
        for j in range(classes_per_client):
            c = int(perm[(i * classes_per_client + j) % k])
            holders[c].append(i)
    train_pools, _ = _class_index_pools(ds)
    counts = np.zeros((k, clients), dtype=np.int64)
    for c in range(k):
        share = largest_remainder(np.ones(len(holders[c])), int(train_pools[c].size))
        for slot, i in enumerate(holders[c]):
            counts[c, i] += share[slot]
    part = _assemble(ds, counts, rng)
    totals = [s.n_samples for s in part.clients]
    if min(totals) < min_samples:
        raise ConfigError(
            f"shard partition leaves a client with {min(totals)} < "
            f"min_samples={min_samples} train samples"
        )
    return part


def batches(
    partition: Partition,
    client_id: int,
    ds: SyntheticDataset,
    batch_size: int,
    epoch_seed,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch of seeded mini-batches over a client's train indices.

    The epoch is a full permutation of the client's indices; the final
    batch may be short. Deterministic given (epoch_seed, client_id).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = partition.split_of(client_id).train_indices
    seed_list = list(epoch_seed) if np.ndim(epoch_seed) else [int(epoch_seed)]
    rng = np.random.default_rng(seed_list + [int(client_id)])
    order = rng.permutation(idx)
    out = []
    for start in range(0, order.size, batch_size):
        chunk = order[start : start + batch_size]
        out.append((ds.features[chunk], ds.labels[chunk]))
    return out


def write_dataset(ds: SyntheticDataset, path: str) -> None:
    """Plain-text snapshot: one `split label f0 .. fD` row per sample."""
    with open(path, "w") as fh:
        fh.write("# dflsim dataset v1\n")
        fh.write(f"# num_classes={ds.num_classes} input_dim={ds.input_dim} n={len(ds.labels)}\n")
        for i in range(len(ds.labels)):
            split = "train" if ds.train_mask[i] else "test"
            row = " ".join("%.17g" % v for v in ds.features[i])
            fh.write(f"{split} {ds.labels[i]} {row}\n")


def read_dataset(path: str) -> SyntheticDataset:
    """Inverse of write_dataset; round-trips float64 values exactly."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# dflsim dataset v1"):
            raise ValueError(f"{path}: not a dataset snapshot")
        meta = dict(kv.split("=") for kv in fh.readline()[1:].split())
        feats, labels, mask = [], [], []
        for line in fh:
            parts = line.split()
            mask.append(parts[0] == "train")
            labels.append(int(parts[1]))
            feats.append([float(v) for v in parts[2:]])
    return SyntheticDataset(
        np.array(feats), np.array(labels), int(meta["num_classes"]), np.array(mask)
    )


def write_partition(part: Partition, path: str) -> None:
    """Plain-text snapshot: two index rows (train, test) per client."""
    with open(path, "w") as fh:
        fh.write("# dflsim partition v1\n")
        fh.write(f"# clients={part.n_clients}\n")
        for i, split in enumerate(part.clients):
            fh.write(f"client {i} train " + " ".join(map(str, split.train_indices)) + "\n")
            fh.write(f"client {i} test " + " ".join(map(str, split.test_indices)) + "\n")


def read_partition(path: str) -> Partition:
    """Inverse of write_partition."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# dflsim partition v1"):
            raise ValueError(f"{path}: not a partition snapshot")
        n = int(fh.readline().split("=")[1])
        rows = {}
        for line in fh:
            parts = line.split()
            rows[(int(parts[1]), parts[2])] = np.array(
                [int(v) for v in parts[3:]], dtype=np.int64
            )
    clients = [ClientSplit(rows[(i, "train")], rows[(i, "test")]) for i in range(n)]
    return Partition(clients)
