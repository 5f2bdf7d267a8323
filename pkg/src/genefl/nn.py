"""Trainable dense-network substrate: forward pass, losses, exact backprop,
and momentum SGD.

All operations are pure functions of their inputs; nothing here holds state.
Training runs in 32-bit; gradient-exactness tests run the same code in
64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import GradientSet, LayeredParams, ShapeMismatchError


class NumericError(RuntimeError):
    """Non-finite loss or gradient, with whatever context the caller added."""


@dataclass(frozen=True)
class Batch:
    """A labelled minibatch. Labels index classes in [0, C)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.ndim != 1 or labels.shape[0] != inputs.shape[0]:
            raise ValueError(
                f"labels shape {labels.shape} does not match {inputs.shape[0]} rows"
            )
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class OptState:
    """Classical momentum state: v <- momentum*v + g; theta <- theta - lr*v."""

    velocity: LayeredParams
    momentum: float
    lr: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")

    @classmethod
    def init(cls, model: LayeredParams, lr: float, momentum: float) -> "OptState":
        return cls(velocity=model.zeros_like(), momentum=momentum, lr=lr)


@dataclass(frozen=True)
class RegularizerSpec:
    """Weights and targets for the two proximal terms added to the data loss.

    lambda1 pulls parameters toward the cluster model; lambda2 pulls only
    the keep-local (elastic-masked) parameters toward it. A term is inactive
    when its weight is zero or its target is missing, and inactive terms add
    nothing to either loss or gradient.

    With layer_scaled (the protocol's adaptive smoothness constraint), the
    strength of both terms on each layer is divided by that layer's
    parameter count, so large tensors are held loosely and small ones
    tightly; a uniform strength would let the big weight matrices dominate
    the pull.
    """

    lambda1: float = 0.0
    lambda2: float = 0.0
    cluster: LayeredParams | None = None
    mask: "object | None" = None  # genecraft.ElasticMask; untyped to avoid a cycle
    layer_scaled: bool = True

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularizer weights must be nonnegative")


def affine_stack(model: LayeredParams) -> list[tuple[str, np.ndarray, str, np.ndarray]]:
    """Interpret a model as (weight, bias) affine units and validate chaining."""
    ids = model.layer_ids
    if len(ids) % 2 != 0:
        raise ShapeMismatchError(f"expected weight/bias pairs, got {len(ids)} layers")
    stack = []
    prev_out: int | None = None
    for i in range(0, len(ids), 2):
        wid, bid = ids[i], ids[i + 1]
        w, b = model.get(wid), model.get(bid)
        if w.ndim != 2:
            raise ShapeMismatchError(f"layer '{wid}' must be a matrix, got shape {w.shape}")
        if b.shape != (w.shape[1],):
            raise ShapeMismatchError(
                f"layer '{bid}' shape {b.shape} does not match '{wid}' columns {w.shape[1]}"
            )
        if prev_out is not None and w.shape[0] != prev_out:
            raise ShapeMismatchError(
                f"layer '{wid}' expects {w.shape[0]} inputs but previous unit emits {prev_out}"
            )
        prev_out = w.shape[1]
        stack.append((wid, w, bid, b))
    return stack


def forward(model: LayeredParams, batch: Batch) -> np.ndarray:
    """Logits of the ReLU stack (final unit linear)."""
    stack = affine_stack(model)
    a = batch.inputs
    if a.shape[1] != stack[0][1].shape[0]:
        raise ShapeMismatchError(
            f"input dim {a.shape[1]} does not match layer '{stack[0][0]}' "
            f"rows {stack[0][1].shape[0]}"
        )
    for i, (_, w, _, b) in enumerate(stack):
        z = a @ w + b
        a = np.maximum(z, 0) if i < len(stack) - 1 else z
    return a


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def loss_and_grad(
    model: LayeredParams, batch: Batch, reg: RegularizerSpec | None = None
) -> tuple[float, GradientSet]:
    """Total loss (CE + active proximal terms) and its exact gradient.

    The cross-entropy term is the batch mean; the proximal terms use the
    smooth squared form 0.5*||.||^2 so gradients exist everywhere.
    """
    reg = reg or RegularizerSpec()
    stack = affine_stack(model)
    if batch.inputs.shape[1] != stack[0][1].shape[0]:
        raise ShapeMismatchError(
            f"input dim {batch.inputs.shape[1]} does not match layer "
            f"'{stack[0][0]}' rows {stack[0][1].shape[0]}"
        )
    n, num_classes = len(batch), stack[-1][1].shape[1]
    if batch.labels.size and batch.labels.max() >= num_classes:
        raise ValueError(
            f"label {batch.labels.max()} out of range for {num_classes} classes"
        )

    # Forward, keeping pre-activations for the backward pass.
    acts = [batch.inputs]
    zs = []
    a = batch.inputs
    for i, (_, w, _, b) in enumerate(stack):
        z = a @ w + b
        zs.append(z)
        a = np.maximum(z, 0) if i < len(stack) - 1 else z
        acts.append(a)

    ls = log_softmax(zs[-1])
    loss = float(-ls[np.arange(n), batch.labels].mean())

    onehot = np.zeros_like(ls)
    onehot[np.arange(n), batch.labels] = 1.0
    delta = (np.exp(ls) - onehot) / n

    grads: dict[str, np.ndarray] = {}
    for i in range(len(stack) - 1, -1, -1):
        wid, w, bid, _ = stack[i]
        grads[wid] = acts[i].T @ delta
        grads[bid] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * (zs[i - 1] > 0)

    if reg.lambda1 != 0.0 and reg.cluster is not None:
        model.require_congruent(reg.cluster, "cluster model")
        for lid, theta in model.items():
            strength = reg.lambda1 / theta.size if reg.layer_scaled else reg.lambda1
            diff = theta - reg.cluster.get(lid)
            loss += 0.5 * strength * float(np.sum(diff.astype(np.float64) ** 2))
            grads[lid] = grads[lid] + strength * diff
    if reg.lambda2 != 0.0 and reg.cluster is not None and reg.mask is not None:
        model.require_congruent(reg.cluster, "cluster model")
        for lid, theta in model.items():
            strength = reg.lambda2 / theta.size if reg.layer_scaled else reg.lambda2
            keep = reg.mask.get(lid)
            diff = (theta - reg.cluster.get(lid)) * keep
            loss += 0.5 * strength * float(np.sum(diff.astype(np.float64) ** 2))
            grads[lid] = grads[lid] + strength * diff

    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r}")
    return loss, LayeredParams(((k, grads[k]) for k in model.layer_ids), copy=False)


def sgd_step(
    model: LayeredParams, grads: GradientSet, state: OptState
) -> tuple[LayeredParams, OptState]:
    """One classical-momentum step; returns the new model and state."""
    model.require_congruent(grads, "gradients")
    model.require_congruent(state.velocity, "velocity")
    new_v = state.velocity.combine(grads, lambda v, g: state.momentum * v + g)
    new_model = model.combine(new_v, lambda t, v: t - state.lr * v)
    return new_model, OptState(velocity=new_v, momentum=state.momentum, lr=state.lr)


def predict(model: LayeredParams, inputs: np.ndarray) -> np.ndarray:
    logits = forward(model, Batch(inputs, np.zeros(len(inputs), dtype=np.int64)))
    return logits.argmax(axis=1)


def accuracy(model: LayeredParams, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(inputs) == 0:
        return 0.0
    return float((predict(model, inputs) == np.asarray(labels)).mean())
