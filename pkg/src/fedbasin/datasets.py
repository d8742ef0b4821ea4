"""Synthetic classification data and heterogeneous client partitioning.

Datasets are Gaussian blobs with unit covariance; partitions assign sample
indices to clients either iid, by class shards (every client holds a fixed
number of distinct classes) or by per-class Dirichlet proportions (label
skew with uneven client sizes). Feature skew is modeled as a per-client
affine transform of the inputs.

All functions are pure and deterministic in their seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Feature matrix, integer labels, and derived one-hot targets."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError("features must be a non-empty 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must be one per sample")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("label out of range")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def one_hot_targets(self) -> np.ndarray:
        onehot = np.zeros((self.n, self.n_classes))
        onehot[np.arange(self.n), self.labels] = 1.0
        return onehot

    def subset_arrays(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(features, labels, one_hot) rows for the given sample indices."""
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.labels[idx], self.one_hot_targets[idx]


@dataclass
class Partition:
    """Disjoint assignment of dataset sample indices to K clients."""

    client_indices: list[np.ndarray]
    method_tag: str
    seed: int

    def __post_init__(self) -> None:
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        if any(ix.size == 0 for ix in self.client_indices):
            raise ValueError("every client needs at least one sample")
        all_idx = np.concatenate(self.client_indices)
        if np.unique(all_idx).size != all_idx.size:
            raise ValueError("client index sets overlap")

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [int(ix.size) for ix in self.client_indices]


@dataclass(frozen=True)
class FeatureSkewSpec:
    """Per-client affine input transform: rotate (in the first two feature
    coordinates), scale, then shift."""

    rotation: float = 0.0
    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    @classmethod
    def identity(cls, dim: int) -> "FeatureSkewSpec":
        return cls(0.0, 1.0, np.zeros(dim))


def _class_mean_directions(n_classes: int, dim: int) -> np.ndarray:
    if n_classes <= dim:
        dirs = np.zeros((n_classes, dim))
        dirs[np.arange(n_classes), np.arange(n_classes)] = 1.0
        return dirs
    # more classes than dims: spread on the unit circle of the first two coords
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    dirs = np.zeros((n_classes, dim))
    dirs[:, 0] = np.cos(angles)
    dirs[:, 1] = np.sin(angles)
    return dirs


def gen_synthetic_classification(seed: int, n_classes: int, n_per_class: int,
                                 dim: int, class_separation: float) -> Dataset:
    """Unit-covariance Gaussian blobs, class means at separation * unit dirs."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if class_separation <= 0:
        raise ValueError("class_separation must be > 0")
    rng = np.random.default_rng(seed)
    means = class_separation * _class_mean_directions(n_classes, dim)
    feats = []
    labels = []
    for c in range(n_classes):
        feats.append(rng.normal(size=(n_per_class, dim)) + means[c])
        labels.append(np.full(n_per_class, c, dtype=np.int64))
    features = np.concatenate(feats)
    labels = np.concatenate(labels)
    order = rng.permutation(features.shape[0])
    return Dataset(features[order], labels[order], n_classes)


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> Partition:
    """Seeded shuffle split into K near-equal chunks (sizes differ by <= 1)."""
    if n_clients < 1 or n_clients > dataset.n:
        raise ValueError("client count out of range")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    chunks = np.array_split(order, n_clients)
    return Partition([np.sort(c) for c in chunks], "iid", seed)


def partition_shards(dataset: Dataset, n_clients: int, classes_per_client: int,
                     seed: int) -> Partition:
    """Equal-size class shards dealt so every client holds exactly
    ``classes_per_client`` distinct classes.

    Each class is cut into ``n_clients * classes_per_client / n_classes``
    shards. Dealing is cyclic over a seeded class permutation, which is what
    guarantees distinct classes per client; the seed also shuffles which
    samples land in which shard.
    """
    K, C, n_cls = n_clients, classes_per_client, dataset.n_classes
    if C < 1 or C > n_cls:
        raise ValueError(f"classes_per_client must be in [1, {n_cls}], got {C}")
    total_shards = K * C
    if total_shards % n_cls != 0:
        raise ValueError(
            f"infeasible shards: {K} clients x {C} classes = {total_shards} shards "
            f"not divisible by {n_cls} classes")
    shards_per_class = total_shards // n_cls
    class_counts = np.bincount(dataset.labels, minlength=n_cls)
    for c, count in enumerate(class_counts):
        if count % shards_per_class != 0:
            raise ValueError(
                f"infeasible shards: class {c} has {count} samples, "
                f"not divisible into {shards_per_class} equal shards")

    rng = np.random.default_rng(seed)
    class_order = rng.permutation(n_cls)
    client_order = rng.permutation(K)

    # shard queues per class, seeded sample shuffle inside each class
    shard_queues: list[list[np.ndarray]] = []
    for c in range(n_cls):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        shard_queues.append([np.sort(s) for s in np.array_split(idx, shards_per_class)])

    assignment: list[list[np.ndarray]] = [[] for _ in range(K)]
    for slot, client in enumerate(client_order):
        for j in range(C):
            cls = class_order[(slot * C + j) % n_cls]
            assignment[client].append(shard_queues[cls].pop())
    client_indices = [np.sort(np.concatenate(shards)) for shards in assignment]
    return Partition(client_indices, f"shards({C})", seed)


def partition_dirichlet(dataset: Dataset, n_clients: int, alpha: float,
                        seed: int) -> Partition:
    """Label skew: per class, a Dirichlet(alpha) proportion vector over
    clients, integerized by largest remainder so class totals are exact.
    A client left empty receives one sample moved from the largest client.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(n_clients, alpha))
        counts = _largest_remainder(props, idx.size)
        offset = 0
        for k in range(n_clients):
            if counts[k]:
                buckets[k].append(idx[offset:offset + counts[k]])
            offset += counts[k]
    groups = [np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64)
              for b in buckets]
    _repair_empty_clients(groups)
    return Partition(groups, f"dirichlet({alpha})", seed)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    assert counts.sum() == total
    return counts


def _repair_empty_clients(groups: list[np.ndarray]) -> None:
    for k, g in enumerate(groups):
        if g.size == 0:
            donor = int(np.argmax([other.size for other in groups]))
            groups[k] = groups[donor][-1:]
            groups[donor] = groups[donor][:-1]


def apply_feature_skew(dataset: Dataset, partition: Partition,
                       specs: list[FeatureSkewSpec]) -> Dataset:
    """New dataset with client k's rows mapped to R(theta_k) * s_k * x + t_k."""
    if len(specs) != partition.n_clients:
        raise ValueError(f"need {partition.n_clients} skew specs, got {len(specs)}")
    features = dataset.features.copy()
    for idx, spec in zip(partition.client_indices, specs):
        x = features[idx] * spec.scale
        cos_t, sin_t = np.cos(spec.rotation), np.sin(spec.rotation)
        rotated = x.copy()
        rotated[:, 0] = cos_t * x[:, 0] - sin_t * x[:, 1]
        rotated[:, 1] = sin_t * x[:, 0] + cos_t * x[:, 1]
        offset = spec.offset if spec.offset.size else np.zeros(dataset.dim)
        features[idx] = rotated + offset
    return Dataset(features, dataset.labels.copy(), dataset.n_classes)


@dataclass
class PartitionReport:
    disjoint: bool
    covered: int
    sizes: list[int]
    class_histograms: list[np.ndarray]


def validate_partition(dataset: Dataset, partition: Partition) -> PartitionReport:
    """Pure diagnostic report; never raises."""
    all_idx = np.concatenate(partition.client_indices)
    disjoint = np.unique(all_idx).size == all_idx.size
    hists = [np.bincount(dataset.labels[ix], minlength=dataset.n_classes)
             for ix in partition.client_indices]
    return PartitionReport(
        disjoint=bool(disjoint),
        covered=int(np.unique(all_idx).size),
        sizes=partition.sizes(),
        class_histograms=hists,
    )


def export_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    """d feature columns then the label column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feat_{j}" for j in range(dataset.dim)] + ["label"])
        for i in range(dataset.n):
            writer.writerow([repr(float(v)) for v in dataset.features[i]] + [int(dataset.labels[i])])


def export_partition_csv(partition: Partition, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "sample_index"])
        for k, idx in enumerate(partition.client_indices):
            for i in idx:
                writer.writerow([k, int(i)])


def load_dataset_csv(path: str | Path, n_classes: int | None = None) -> Dataset:
    rows = list(csv.reader(open(path)))
    header, body = rows[0], rows[1:]
    dim = len(header) - 1
    features = np.array([[float(v) for v in r[:dim]] for r in body])
    labels = np.array([int(r[dim]) for r in body])
    return Dataset(features, labels, n_classes or int(labels.max()) + 1)


def load_partition_csv(path: str | Path, method_tag: str = "loaded",
                       seed: int = 0) -> Partition:
    rows = list(csv.reader(open(path)))[1:]
    groups: dict[int, list[int]] = {}
    for client, idx in rows:
        groups.setdefault(int(client), []).append(int(idx))
    ordered = [np.array(groups[k]) for k in sorted(groups)]
    return Partition(ordered, method_tag, seed)
