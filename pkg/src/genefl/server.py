"""Server-side state machine: one-shot client clustering from SVD data
signatures, cluster-wise gene aggregation, and routing/initialization of
dynamically joining clients."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .genecraft import LearnGene
from .params import Architecture, LayeredParams, ShapeMismatchError, init_params


@dataclass(frozen=True)
class Signature:
    """Flattened top-d left singular vectors of a fixed-size input subsample."""

    vector: np.ndarray
    d: int
    m0: int
    rank_deficient: bool = False

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size != self.m0 * self.d:
            raise ValueError(f"signature length {vec.size} != m0*d = {self.m0 * self.d}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("non-finite signature")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class ClusterState:
    cluster_id: int
    model: LayeredParams
    gene: LearnGene | None
    mean_signature: np.ndarray
    member_count: int

    def __post_init__(self) -> None:
        if self.member_count < 0:
            raise ValueError("member_count must be >= 0")
        if not np.all(np.isfinite(self.mean_signature)):
            raise ValueError("non-finite cluster mean signature")


@dataclass(frozen=True)
class RoutingTable:
    assignments: dict[int, int]
    means: list[np.ndarray]

    def __post_init__(self) -> None:
        for cid, k in self.assignments.items():
            if not 0 <= k < len(self.means):
                raise ValueError(f"client {cid} routed to unknown cluster {k}")


def signature_subsample(inputs: np.ndarray, m0: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded fixed-size row subsample; short shards pad with zero rows."""
    inputs = np.asarray(inputs, dtype=np.float64)
    n = len(inputs)
    if n >= m0:
        idx = rng.choice(n, size=m0, replace=False)
        return inputs[idx]
    pad = np.zeros((m0 - n, inputs.shape[1]))
    return np.concatenate([inputs, pad], axis=0)


def svd_signature(x: np.ndarray, d: int) -> Signature:
    """Top-d left singular vectors, sign-fixed and flattened column-major.

    Each column's largest-magnitude entry is made positive so the signature
    is reproducible. Rank-deficient inputs get zero columns past the rank and
    a deficiency flag.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {x.shape}")
    m0 = x.shape[0]
    if d > min(x.shape):
        raise ValueError(f"d={d} exceeds min(shape)={min(x.shape)}")
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    cols = u[:, :d].copy()
    if rank < d:
        cols[:, rank:] = 0.0
    for j in range(min(rank, d)):
        pivot = np.argmax(np.abs(cols[:, j]))
        if cols[pivot, j] < 0:
            cols[:, j] = -cols[:, j]
    return Signature(
        vector=cols.ravel(order="F"), d=d, m0=m0, rank_deficient=rank < d
    )


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ / Lloyd with farthest-point reseeding of empty clusters."""
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            probs = np.cumsum(d2 / total)
            centers[j] = points[np.searchsorted(probs, rng.random())]
        else:
            centers[j] = points[rng.integers(n)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))

    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(100):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        assignment = dists.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
            else:
                own = dists[np.arange(n), assignment]
                new_centers[j] = points[int(np.argmax(own))]
        shift = float(np.linalg.norm(new_centers - centers, axis=1).max())
        centers = new_centers
        if shift < 1e-6:
            break
    dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    return dists.argmin(axis=1)


def cluster_known(
    signatures: Sequence[Signature], k: int, seed, client_ids: Sequence[int] | None = None
) -> RoutingTable:
    """One-shot K-means over signature vectors; means are member averages."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(signatures):
        raise ValueError(f"k={k} exceeds the {len(signatures)} clients")
    ids = list(client_ids) if client_ids is not None else list(range(len(signatures)))
    points = np.stack([sig.vector for sig in signatures])
    assignment = _kmeans(points, k, np.random.default_rng(seed))
    means = []
    for j in range(k):
        members = assignment == j
        means.append(points[members].mean(axis=0) if members.any() else np.zeros(points.shape[1]))
    return RoutingTable(
        assignments={cid: int(a) for cid, a in zip(ids, assignment)}, means=means
    )


def aggregate_learngene(genes: Sequence[LearnGene], prev: ClusterState) -> ClusterState:
    """Fold uploaded genes into the cluster model and cluster gene.

    Per layer of the cluster model: the arithmetic mean of the covering
    genes, summed in ascending client order; layers covered by no gene carry
    the previous cluster model's values. The cluster gene becomes the union
    of the layers condensed this round, at the fresh mean values.

    An empty gene list leaves the cluster untouched.
    """
    if not genes:
        return prev
    ordered = sorted(
        genes, key=lambda g: g.origin[0] if g.origin is not None else -1
    )
    model_layers: list[tuple[str, np.ndarray]] = []
    gene_mask: dict[str, bool] = {}
    gene_tensors: dict[str, np.ndarray] = {}
    for lid in prev.model.layer_ids:
        expected = prev.model.get(lid).shape
        covering = []
        for g in ordered:
            if g.layer_mask.get(lid):
                t = g.tensors[lid]
                if t.shape != expected:
                    who = g.origin[0] if g.origin is not None else "?"
                    raise ShapeMismatchError(
                        f"client {who}, layer '{lid}': gene shape {t.shape} vs {expected}"
                    )
                covering.append(t)
        gene_mask[lid] = bool(covering)
        if covering:
            acc = covering[0].astype(np.float32, copy=True)
            for t in covering[1:]:
                acc = acc + t.astype(np.float32)
            mean = acc / len(covering)
            model_layers.append((lid, mean))
            gene_tensors[lid] = mean
        else:
            model_layers.append((lid, prev.model.get(lid)))
    new_gene = LearnGene(
        layer_mask=gene_mask,
        tensors=gene_tensors,
        gamma=sum(gene_mask.values()),
        origin=None,
    )
    return replace(prev, model=LayeredParams(model_layers), gene=new_gene)


def nearest_cluster(
    u: Signature, clusters: Sequence[ClusterState]
) -> tuple[int, float]:
    """Closest cluster mean by Euclidean distance; ties go to the lowest id."""
    if not clusters:
        raise ValueError("no clusters")
    best_id, best_dist = None, np.inf
    for cluster in sorted(clusters, key=lambda c: c.cluster_id):
        if cluster.mean_signature.shape != u.vector.shape:
            raise ValueError(
                f"signature length {u.vector.size} != cluster {cluster.cluster_id} "
                f"mean length {cluster.mean_signature.size}"
            )
        dist = float(np.linalg.norm(u.vector - cluster.mean_signature))
        if dist < best_dist:
            best_id, best_dist = cluster.cluster_id, dist
    return best_id, best_dist


def admit_agnostic(
    u: Signature, clusters: Sequence[ClusterState]
) -> tuple[LearnGene | None, ClusterState]:
    """Route a joining client: return the nearest cluster's gene and that
    cluster's state with the running-mean signature and member count updated."""
    k, _ = nearest_cluster(u, clusters)
    cluster = next(c for c in clusters if c.cluster_id == k)
    n = cluster.member_count
    new_mean = (n * cluster.mean_signature + u.vector) / (n + 1)
    updated = replace(cluster, mean_signature=new_mean, member_count=n + 1)
    return cluster.gene, updated


def init_agnostic(
    gene: LearnGene | None, arch: Architecture, seed
) -> LayeredParams:
    """Gene layers verbatim; the rest fan-in uniform from the given seed.

    Randomness is consumed only for non-gene layers, so the inherited layers
    are bit-identical to the gene regardless of seed.
    """
    inherit = dict(gene.tensors) if gene is not None else None
    return init_params(arch, seed, inherit=inherit)
