"""Client-side round logic: regularized local updates followed by gene
condensation.

Each round runs two sub-steps per minibatch through one shared momentum
state: a step on the data loss plus the cluster-proximal term, then a step
on the elastic-masked proximal term alone (skipped entirely when its weight
is zero, so disabling it reproduces plain SGD bit-for-bit).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import Shard
from .genecraft import (
    ElasticMask,
    LearnGene,
    elastic_mask,
    fisher_diag,
    layer_scores,
    normalize_fisher,
    select_learngene,
)
from .nn import Batch, NumericError, OptState, RegularizerSpec, loss_and_grad, sgd_step
from .params import GradientSet, LayeredParams


@dataclass(frozen=True)
class LocalConfig:
    epochs: int
    batch_size: int
    lambda1: float
    lambda2: float
    epsilon: float
    gamma: int
    lr: float
    momentum: float
    invert_scores: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0,1]")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    model: LayeredParams
    previous_model: LayeredParams
    opt_state: OptState
    cluster_id: int | None = None
    shard: Shard | None = None
    is_agnostic: bool = False


def loss_gen(model: LayeredParams, cluster: LayeredParams) -> float:
    """Smooth proximal distance to the cluster model: 0.5 * ||theta - Theta||^2."""
    model.require_congruent(cluster, "cluster model")
    total = 0.0
    for lid, t in model.items():
        diff = t.astype(np.float64) - cluster.get(lid).astype(np.float64)
        total += float(np.sum(diff * diff))
    return 0.5 * total


def loss_elg(model: LayeredParams, cluster: LayeredParams, mask: ElasticMask) -> float:
    """Proximal distance restricted to the keep-local index set."""
    model.require_congruent(cluster, "cluster model")
    total = 0.0
    for lid, t in model.items():
        keep = mask.get(lid)
        diff = (t.astype(np.float64) - cluster.get(lid).astype(np.float64)) * keep
        total += float(np.sum(diff * diff))
    return 0.5 * total


def _elastic_grad(
    model: LayeredParams,
    cluster: LayeredParams,
    mask: ElasticMask,
    lam: float,
    layer_scaled: bool = True,
) -> GradientSet:
    return LayeredParams(
        (
            (lid, (lam / t.size if layer_scaled else lam) * (t - cluster.get(lid)) * mask.get(lid))
            for lid, t in model.items()
        ),
        copy=False,
    )


def local_update(
    state: ClientState,
    cluster_model: LayeredParams,
    cfg: LocalConfig,
    inputs: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    *,
    round_index: int | None = None,
    trace_hook: Callable[[dict], None] | None = None,
) -> tuple[ClientState, LearnGene]:
    """One full client round: Fisher pass, regularized epochs, condensation.

    The round-start model is the reference snapshot: the Fisher diagonal is
    estimated on it before training begins, and the layer scores afterwards
    measure this round's drift away from it. The returned state carries the
    trained model as the next round's previous model.
    """
    if len(inputs) == 0:
        raise ValueError(f"client {state.client_id}: empty shard")
    theta_tilde = state.model.copy()
    model, opt = state.model, state.opt_state
    model.require_congruent(cluster_model, "cluster model")

    try:
        fisher = fisher_diag(theta_tilde, [Batch(inputs, labels)])
        mask = elastic_mask(normalize_fisher(fisher), cfg.epsilon)

        n = len(inputs)
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                batch = Batch(inputs[chunk], labels[chunk])
                reg = RegularizerSpec(lambda1=cfg.lambda1, cluster=cluster_model)
                _, grads = loss_and_grad(model, batch, reg)
                model, opt = sgd_step(model, grads, opt)
                if cfg.lambda2 > 0.0:
                    prox = _elastic_grad(model, cluster_model, mask, cfg.lambda2)
                    model, opt = sgd_step(model, prox, opt)

        scores = layer_scores(model, theta_tilde)
        origin = (state.client_id, round_index) if round_index is not None else None
        gene = select_learngene(
            model, scores, cfg.gamma, origin=origin, invert_scores=cfg.invert_scores
        )
    except NumericError as e:
        raise NumericError(
            f"client {state.client_id}, round {round_index}: {e}"
        ) from e

    if trace_hook is not None:
        l_cls, _ = loss_and_grad(model, Batch(inputs, labels))
        trace_hook(
            {
                "l_cls": l_cls,
                "l_gen": loss_gen(model, cluster_model),
                "l_elg": loss_elg(model, cluster_model, mask),
                "gamma": cfg.gamma,
                "gene_layers": list(gene.layer_ids),
                "gene_params": gene.param_count,
            }
        )

    new_state = replace(state, model=model, previous_model=model.copy(), opt_state=opt)
    return new_state, gene


def plain_local_train(
    state: ClientState,
    cfg: LocalConfig,
    inputs: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> ClientState:
    """Baseline local loop: cross-entropy only, same batching as local_update."""
    if len(inputs) == 0:
        raise ValueError(f"client {state.client_id}: empty shard")
    model, opt = state.model, state.opt_state
    n = len(inputs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            _, grads = loss_and_grad(model, Batch(inputs[chunk], labels[chunk]))
            model, opt = sgd_step(model, grads, opt)
    return replace(state, model=model, previous_model=model.copy(), opt_state=opt)
