"""Gene condensation mathematics: empirical Fisher diagonal, min-max
normalization, elastic keep-local masks, per-layer sensitivity scores, and
top-gamma gene extraction with its shrink schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint
from .nn import Batch, affine_stack, log_softmax
from .params import LayeredParams


@dataclass(frozen=True)
class FisherDiag:
    """Per-parameter mean squared score of the log-likelihood (all >= 0)."""

    values: LayeredParams

    def __post_init__(self) -> None:
        for lid, t in self.values.items():
            if np.any(t < 0):
                raise ValueError(f"negative Fisher entry in layer '{lid}'")


@dataclass(frozen=True)
class NormalizedFisher:
    """Globally min-max normalized Fisher values in [0,1]."""

    values: LayeredParams

    def __post_init__(self) -> None:
        for lid, t in self.values.items():
            if np.any(t < 0) or np.any(t > 1):
                raise ValueError(f"normalized Fisher out of [0,1] in layer '{lid}'")


class ElasticMask:
    """Per-scalar keep-local booleans (True where the model keeps its own
    value; False where the cluster value takes over)."""

    __slots__ = ("_masks",)

    def __init__(self, masks: Iterable[tuple[str, np.ndarray]]):
        self._masks = {str(k): np.asarray(v, dtype=bool) for k, v in masks}

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(self._masks)

    def get(self, layer_id: str) -> np.ndarray:
        return self._masks[layer_id]

    def items(self):
        return iter(self._masks.items())

    @property
    def keep_count(self) -> int:
        return int(sum(m.sum() for m in self._masks.values()))

    def congruent_with(self, model: LayeredParams) -> bool:
        return self.layer_ids == model.layer_ids and all(
            self._masks[k].shape == model.get(k).shape for k in self._masks
        )


@dataclass(frozen=True)
class LayerScores:
    """Per-layer sensitivity scores, nonnegative and summing to one."""

    scores: dict[str, float]

    def __post_init__(self) -> None:
        total = sum(self.scores.values())
        if any(v < 0 for v in self.scores.values()):
            raise ValueError("layer scores must be nonnegative")
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"layer scores sum to {total}, expected 1")


@dataclass(frozen=True)
class LearnGene:
    """The condensed subset of layers selected for exchange.

    layer_mask covers every layer id of the source model; tensors are stored
    only for the retained (True) layers.
    """

    layer_mask: dict[str, bool]
    tensors: dict[str, np.ndarray]
    gamma: int
    origin: tuple[int, int] | None = None  # (client_id, round)

    def __post_init__(self) -> None:
        retained = [lid for lid, bit in self.layer_mask.items() if bit]
        if len(retained) != self.gamma:
            raise ValueError(f"mask retains {len(retained)} layers, gamma={self.gamma}")
        if self.gamma < 1 or self.gamma > len(self.layer_mask):
            raise ValueError(f"gamma={self.gamma} out of range for {len(self.layer_mask)} layers")
        if set(retained) != set(self.tensors):
            raise ValueError("tensors present iff the mask bit is set")

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(lid for lid, bit in self.layer_mask.items() if bit)

    @property
    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def fisher_diag(model: LayeredParams, shard_batches: Sequence[Batch]) -> FisherDiag:
    """Empirical Fisher: mean over samples of the squared per-sample gradient
    of log p(y|x; theta).

    Per-sample squares are computed exactly (no within-batch averaging before
    squaring): for an affine unit the per-sample weight gradient is the outer
    product a delta^T, so the sum of its squares is (a*a)^T @ (delta*delta).
    """
    batches = list(shard_batches)
    if not batches or all(len(b) == 0 for b in batches):
        raise ValueError("fisher_diag needs at least one sample")
    stack = affine_stack(model)
    acc = {lid: np.zeros(t.shape, dtype=np.float64) for lid, t in model.items()}
    total = 0
    for batch in batches:
        if len(batch) == 0:
            continue
        total += len(batch)
        acts = [batch.inputs]
        zs = []
        a = batch.inputs
        for i, (_, w, _, b) in enumerate(stack):
            z = a @ w + b
            zs.append(z)
            a = np.maximum(z, 0) if i < len(stack) - 1 else z
            acts.append(a)
        ls = log_softmax(zs[-1])
        onehot = np.zeros_like(ls)
        onehot[np.arange(len(batch)), batch.labels] = 1.0
        delta = np.exp(ls) - onehot  # per-sample d(-log p)/dz, unscaled
        for i in range(len(stack) - 1, -1, -1):
            wid, w, bid, _ = stack[i]
            d2 = delta.astype(np.float64) ** 2
            acc[wid] += (acts[i].astype(np.float64) ** 2).T @ d2
            acc[bid] += d2.sum(axis=0)
            if i > 0:
                delta = (delta @ w.T) * (zs[i - 1] > 0)
    values = LayeredParams(((lid, acc[lid] / total) for lid in model.layer_ids), copy=False)
    return FisherDiag(values=values)


def normalize_fisher(fisher: FisherDiag) -> NormalizedFisher:
    """Global min-max over all scalars; a constant input maps to all zeros."""
    flat_min = min(float(t.min()) for _, t in fisher.values.items())
    flat_max = max(float(t.max()) for _, t in fisher.values.items())
    span = flat_max - flat_min
    if span <= 0:
        return NormalizedFisher(values=fisher.values.zeros_like())
    return NormalizedFisher(values=fisher.values.map(lambda t: (t - flat_min) / span))


def elastic_mask(fhat: NormalizedFisher, epsilon: float) -> ElasticMask:
    """keep_local where the normalized Fisher value is <= epsilon (inclusive)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0,1], got {epsilon}")
    return ElasticMask((lid, t <= epsilon) for lid, t in fhat.values.items())


def compose_elastic(
    previous: LayeredParams, cluster: LayeredParams, mask: ElasticMask
) -> LayeredParams:
    """Per-scalar mix: previous-local values where keep_local, cluster elsewhere."""
    previous.require_congruent(cluster, "cluster model")
    return LayeredParams(
        ((lid, np.where(mask.get(lid), t, cluster.get(lid))) for lid, t in previous.items()),
        copy=False,
    )


def layer_scores(current: LayeredParams, previous: LayeredParams) -> LayerScores:
    """Per-layer cosine similarity between current and previous tensors,
    divided by layer size, shifted to be nonnegative, normalized to sum 1."""
    current.require_congruent(previous, "previous model")
    raw: dict[str, float] = {}
    for lid, cur in current.items():
        prev = previous.get(lid)
        a = cur.astype(np.float64).ravel()
        b = prev.astype(np.float64).ravel()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise ValueError(f"degenerate cosine: layer '{lid}' has zero norm")
        raw[lid] = float(a @ b / (na * nb)) / a.size
    shift = min(0.0, min(raw.values()))
    shifted = {lid: v - shift for lid, v in raw.items()}
    total = sum(shifted.values())
    if total <= 0.0:
        uniform = 1.0 / len(shifted)
        return LayerScores(scores={lid: uniform for lid in shifted})
    return LayerScores(scores={lid: v / total for lid, v in shifted.items()})


def select_learngene(
    model: LayeredParams,
    scores: LayerScores,
    gamma: int,
    *,
    origin: tuple[int, int] | None = None,
    invert_scores: bool = False,
) -> LearnGene:
    """Retain the gamma highest-scoring layers (ties break toward the lower
    layer index); invert_scores flips to the lowest-scoring layers."""
    ids = model.layer_ids
    if not 1 <= gamma <= len(ids):
        raise ValueError(f"gamma={gamma} out of range [1, {len(ids)}]")
    if set(scores.scores) != set(ids):
        raise ValueError("scores do not cover the model's layers")
    sign = 1.0 if invert_scores else -1.0
    order = sorted(range(len(ids)), key=lambda i: (sign * scores.scores[ids[i]], i))
    keep = set(order[:gamma])
    mask = {lid: (i in keep) for i, lid in enumerate(ids)}
    tensors = {lid: np.array(model.get(lid)) for lid, bit in mask.items() if bit}
    return LearnGene(layer_mask=mask, tensors=tensors, gamma=gamma, origin=origin)


def gamma_schedule(round_index: int, num_layers: int, gamma_min: int, warmup: int) -> int:
    """Linear integer ramp: num_layers at round 0 down to gamma_min at round
    >= warmup (floor interpolation, monotone non-increasing)."""
    if not 1 <= gamma_min <= num_layers:
        raise ValueError(f"gamma_min={gamma_min} out of range [1, {num_layers}]")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    if round_index < 0:
        raise ValueError("round_index must be >= 0")
    if round_index >= warmup:
        return gamma_min
    return (num_layers * warmup - (num_layers - gamma_min) * round_index) // warmup


def save_gene(path, gene: LearnGene) -> None:
    """Persist a gene in the checkpoint container with a JSON mask descriptor."""
    params = LayeredParams(((lid, gene.tensors[lid]) for lid in gene.layer_ids))
    meta = {
        "kind": "learngene",
        "mask": {lid: int(bit) for lid, bit in gene.layer_mask.items()},
        "gamma": gene.gamma,
        "origin": list(gene.origin) if gene.origin is not None else None,
    }
    checkpoint.save_params(path, params, meta=meta)


def load_gene(path) -> LearnGene:
    params, meta = checkpoint.load_params(path)
    if meta.get("kind") != "learngene":
        raise ValueError(f"{path}: not a learngene container")
    mask = {lid: bool(bit) for lid, bit in meta["mask"].items()}
    origin = tuple(meta["origin"]) if meta.get("origin") else None
    tensors = {lid: params.get(lid) for lid, bit in mask.items() if bit}
    return LearnGene(layer_mask=mask, tensors=tensors, gamma=int(meta["gamma"]), origin=origin)
