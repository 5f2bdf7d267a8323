"""Synthetic data, CSV ingestion, known/agnostic class split, and the two
non-IID partitioners (class sharding and Dirichlet allocation)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Feature matrix in [0,1], integer labels, and the sorted class list."""

    inputs: np.ndarray
    labels: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.ndim != 1 or len(inputs) != len(labels):
            raise ValueError(
                f"inputs {inputs.shape} and labels {labels.shape} do not align"
            )
        if not np.all(np.isfinite(inputs)):
            raise ValueError("non-finite feature values")
        present = set(int(c) for c in np.unique(labels))
        listed = set(int(c) for c in self.class_ids)
        if not present <= listed:
            raise ValueError(f"labels {present - listed} missing from class_ids")
        if listed - present:
            raise ValueError(f"classes {sorted(listed - present)} have no samples")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_ids", tuple(sorted(int(c) for c in self.class_ids)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class Shard:
    """One client's slice of a dataset: unique row indices plus its class set."""

    owner_id: int
    indices: np.ndarray
    present_classes: frozenset[int]

    @classmethod
    def from_indices(cls, owner_id: int, indices, labels: np.ndarray) -> "Shard":
        idx = np.asarray(indices, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError(f"shard {owner_id}: duplicate indices")
        present = frozenset(int(c) for c in np.unique(labels[idx])) if len(idx) else frozenset()
        return cls(owner_id=owner_id, indices=idx, present_classes=present)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class Sharding:
    """Each client receives exactly s distinct classes."""

    s: int


@dataclass(frozen=True)
class Dirichlet:
    """Per-class client proportions drawn from Dir(beta * 1)."""

    beta: float


@dataclass(frozen=True)
class PartitionSpec:
    strategy: Sharding | Dirichlet
    num_clients: int
    seed: int

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if isinstance(self.strategy, Sharding) and self.strategy.s < 1:
            raise ValueError("sharding parameter s must be >= 1")
        if isinstance(self.strategy, Dirichlet) and not self.strategy.beta > 0:
            raise ValueError("dirichlet beta must be > 0")


def make_synthetic(num_classes: int, per_class: int, input_dim: int, seed) -> Dataset:
    """Gaussian class clusters with means on a radius-3 sphere and unit noise,
    min-max normalized to [0,1]. Deterministic per seed."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 1:
        raise ValueError("need at least 1 sample per class")
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(num_classes):
        direction = rng.standard_normal(input_dim)
        norm = np.linalg.norm(direction)
        mean = 3.0 * direction / norm if norm > 0 else np.zeros(input_dim)
        blocks.append(mean + rng.standard_normal((per_class, input_dim)))
    inputs = np.concatenate(blocks, axis=0)
    lo, hi = inputs.min(), inputs.max()
    inputs = (inputs - lo) / (hi - lo) if hi > lo else np.zeros_like(inputs)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    return Dataset(inputs=inputs, labels=labels, class_ids=tuple(range(num_classes)))


def split_known_agnostic(class_ids, fraction_known: float, seed) -> tuple[set[int], set[int]]:
    """Seeded disjoint split of the class list into known and agnostic sets."""
    classes = sorted(int(c) for c in class_ids)
    if len(classes) < 2:
        raise ValueError("cannot split fewer than 2 classes")
    if not 0.0 < fraction_known < 1.0:
        raise ValueError(f"fraction_known must be in (0,1), got {fraction_known}")
    n_known = int(round(fraction_known * len(classes)))
    n_known = min(max(n_known, 1), len(classes) - 1)
    perm = np.random.default_rng(seed).permutation(classes)
    return set(int(c) for c in perm[:n_known]), set(int(c) for c in perm[n_known:])


def subset_by_classes(dataset: Dataset, classes) -> tuple[Dataset, np.ndarray]:
    """Restrict to the given classes; also return the original row indices."""
    keep = np.isin(dataset.labels, sorted(classes))
    idx = np.flatnonzero(keep)
    sub = Dataset(
        inputs=dataset.inputs[idx],
        labels=dataset.labels[idx],
        class_ids=tuple(sorted(int(c) for c in classes)),
    )
    return sub, idx


def partition(dataset: Dataset, spec: PartitionSpec) -> list[Shard]:
    if isinstance(spec.strategy, Sharding):
        return partition_sharding(dataset, spec)
    return partition_dirichlet(dataset, spec)


def partition_sharding(dataset: Dataset, spec: PartitionSpec) -> list[Shard]:
    """Give every client exactly s distinct classes via a seeded cycle of a
    class permutation; each class's samples are split into contiguous blocks,
    one per assigned client.

    rng call order: (1) one permutation of the class list, (2) one
    permutation of the recipient list per class, in ascending class order.
    """
    if not isinstance(spec.strategy, Sharding):
        raise TypeError("spec does not carry a Sharding strategy")
    s, n_clients = spec.strategy.s, spec.num_clients
    classes = list(dataset.class_ids)
    if s > len(classes):
        raise ValueError(f"s={s} exceeds the {len(classes)} available classes")
    rng = np.random.default_rng(spec.seed)
    perm = [int(c) for c in rng.permutation(classes)]

    # Client i takes the length-s window starting at i*s in the repeated
    # permutation; any window of length s <= C over a repeated permutation
    # holds distinct classes.
    recipients: dict[int, list[int]] = {c: [] for c in classes}
    for client in range(n_clients):
        for j in range(s):
            recipients[perm[(client * s + j) % len(classes)]].append(client)

    assigned: dict[int, list[np.ndarray]] = {c: [] for c in range(n_clients)}
    for c in classes:
        takers = recipients[c]
        if not takers:
            continue
        idx_c = np.flatnonzero(dataset.labels == c)
        if len(idx_c) < len(takers):
            raise ValueError(
                f"class {c} has {len(idx_c)} samples for {len(takers)} recipients"
            )
        order = rng.permutation(takers)
        for client, block in zip(order, np.array_split(idx_c, len(takers))):
            assigned[int(client)].append(block)

    shards = []
    for client in range(n_clients):
        idx = np.concatenate(assigned[client]) if assigned[client] else np.empty(0, np.int64)
        shards.append(Shard.from_indices(client, idx, dataset.labels))
    return shards


def dirichlet_proportions(rng: np.random.Generator, beta: float, n: int) -> np.ndarray:
    """Dir(beta*1_n) draw via gamma normalization (uniform if all mass underflows)."""
    g = rng.standard_gamma(beta, n)
    total = g.sum()
    return g / total if total > 0 else np.full(n, 1.0 / n)


def partition_dirichlet(dataset: Dataset, spec: PartitionSpec) -> list[Shard]:
    """Per class, split samples by the cumulative quota of a Dir(beta) draw.

    Clients that end up empty are repaired by moving one sample (the last
    index) from the currently largest shard.
    """
    if not isinstance(spec.strategy, Dirichlet):
        raise TypeError("spec does not carry a Dirichlet strategy")
    beta, n_clients = spec.strategy.beta, spec.num_clients
    rng = np.random.default_rng(spec.seed)
    assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in dataset.class_ids:
        idx_c = np.flatnonzero(dataset.labels == c)
        p = dirichlet_proportions(rng, beta, n_clients)
        cuts = (np.cumsum(p)[:-1] * len(idx_c)).astype(np.int64)
        for client, block in enumerate(np.split(idx_c, cuts)):
            assigned[client].append(block)

    pools = [
        list(np.concatenate(blocks)) if blocks else [] for blocks in assigned
    ]
    for client in range(n_clients):
        while not pools[client]:
            donor = int(np.argmax([len(p) for p in pools]))
            if len(pools[donor]) <= 1:
                raise ValueError("not enough samples to give every client one")
            pools[client].append(pools[donor].pop())
    return [
        Shard.from_indices(client, np.array(sorted(pools[client]), dtype=np.int64), dataset.labels)
        for client in range(n_clients)
    ]


def load_csv(path) -> Dataset:
    """Parse `label,f_1,...,f_d` rows under a header; features clamp to [0,1].

    Malformed rows raise with their 1-based line number.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file, expected a header line")
    n_cols = len(lines[0].split(","))
    if n_cols < 2:
        raise ValueError(f"{path}: header must list a label and at least one feature")
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != n_cols:
            raise ValueError(
                f"{path}: line {lineno}: expected {n_cols} columns, got {len(parts)}"
            )
        try:
            labels.append(int(parts[0]))
            rows.append([float(p) for p in parts[1:]])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    inputs = np.clip(np.array(rows, dtype=np.float32), 0.0, 1.0)
    labels_arr = np.array(labels, dtype=np.int64)
    return Dataset(
        inputs=inputs,
        labels=labels_arr,
        class_ids=tuple(int(c) for c in np.unique(labels_arr)),
    )


def save_csv(dataset: Dataset, path) -> None:
    """Write the CSV form; float32 features round-trip bit-exactly."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        cols = ",".join(f"f_{j + 1}" for j in range(dataset.input_dim))
        f.write(f"label,{cols}\n")
        for label, row in zip(dataset.labels, dataset.inputs):
            values = ",".join(repr(float(v)) for v in row)
            f.write(f"{int(label)},{values}\n")


def export_partition_manifest(shards: list[Shard], path, source_indices=None) -> None:
    """JSON audit record: client_id -> sample indices (original rows when a
    source mapping is given) and class list."""
    manifest = {}
    for shard in shards:
        idx = shard.indices
        if source_indices is not None:
            idx = np.asarray(source_indices)[idx]
        manifest[str(shard.owner_id)] = {
            "indices": [int(i) for i in idx],
            "classes": sorted(int(c) for c in shard.present_classes),
        }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
