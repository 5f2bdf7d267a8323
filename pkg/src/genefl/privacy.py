"""Gradient-inversion privacy probe: reconstruct a victim input by matching
observed per-layer gradients, scored by PSNR.

The attacker holds the full parameter vector but the matching objective sums
only over the observed (exchanged) layers. The objective's gradient with
respect to the candidate input is computed analytically (reverse mode over
the backward pass, with ReLU masks treated as locally constant), so the
optimizer needs no finite differencing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import NumericError
from .params import LayeredParams, ShapeMismatchError


@dataclass(frozen=True)
class AttackObservation:
    """What a malicious server sees for one victim sample.

    params: the complete model (worst case: random layers are known too);
    observed_layers: the exchanged layer ids whose gradients leak;
    grads: the leaked per-layer gradients for that sample;
    true_label: the victim label (granted to the attacker, which only
    strengthens the attack).
    """

    params: LayeredParams
    observed_layers: tuple[str, ...]
    grads: LayeredParams
    true_label: int

    def __post_init__(self) -> None:
        for lid in self.observed_layers:
            if lid not in self.params:
                raise ValueError(f"observed layer '{lid}' not in the model")
            if self.grads.get(lid).shape != self.params.get(lid).shape:
                raise ShapeMismatchError(f"gradient shape mismatch on '{lid}'")

    @property
    def input_dim(self) -> int:
        return self.params.get(self.params.layer_ids[0]).shape[0]


@dataclass(frozen=True)
class ReconState:
    """Best reconstruction found, clamped to [0,1], with its objective value."""

    recon: np.ndarray
    iterations: int
    final_loss: float
    loss_trace: tuple[float, ...]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.recon)):
            raise ValueError("non-finite reconstruction")
        if self.final_loss < 0:
            raise ValueError("objective value must be nonnegative")


def _stack_arrays(params: LayeredParams) -> list[tuple[np.ndarray, np.ndarray]]:
    ids = params.layer_ids
    return [
        (np.asarray(params.get(ids[i]), dtype=np.float64),
         np.asarray(params.get(ids[i + 1]), dtype=np.float64))
        for i in range(0, len(ids), 2)
    ]


def _sample_gradients(
    stack: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray, label: int
) -> tuple[list[np.ndarray], list[np.ndarray], dict]:
    """Per-layer CE gradients for a single sample, plus the forward/backward
    intermediates the double-backward pass reuses."""
    depth = len(stack)
    acts = [x]
    zs, masks = [], []
    a = x
    for i, (w, b) in enumerate(stack):
        z = a @ w + b
        zs.append(z)
        if i < depth - 1:
            mask = z > 0
            masks.append(mask)
            a = z * mask
        else:
            a = z
        acts.append(a)
    shift = zs[-1] - zs[-1].max()
    p = np.exp(shift)
    p = p / p.sum()
    deltas = [None] * depth
    delta = p.copy()
    delta[label] -= 1.0
    deltas[depth - 1] = delta
    for i in range(depth - 2, -1, -1):
        deltas[i] = (deltas[i + 1] @ stack[i + 1][0].T) * masks[i]
    g_w = [np.outer(acts[i], deltas[i]) for i in range(depth)]
    g_b = [deltas[i].copy() for i in range(depth)]
    return g_w, g_b, {"acts": acts, "masks": masks, "deltas": deltas, "p": p}


def observe_gradients(
    model: LayeredParams, x: np.ndarray, label: int, layers: tuple[str, ...] | None = None
) -> AttackObservation:
    """Simulate the victim side: single-sample gradients on the given layers
    (all layers when none are named, i.e. full-model sharing)."""
    params = model.astype(np.float64)
    ids = params.layer_ids
    observed = tuple(layers) if layers is not None else ids
    for lid in observed:
        if lid not in params:
            raise ValueError(f"unknown layer '{lid}'")
    stack = _stack_arrays(params)
    x = np.asarray(x, dtype=np.float64).ravel()
    g_w, g_b, _ = _sample_gradients(stack, x, int(label))
    grads = {}
    for i in range(len(stack)):
        grads[ids[2 * i]] = g_w[i]
        grads[ids[2 * i + 1]] = g_b[i]
    return AttackObservation(
        params=params,
        observed_layers=observed,
        grads=LayeredParams((lid, grads[lid]) for lid in ids if lid in observed),
        true_label=int(label),
    )


def matching_loss_and_input_grad(
    obs: AttackObservation, x: np.ndarray
) -> tuple[float, np.ndarray]:
    """Gradient-matching objective sum_observed ||g(x) - g_obs||^2 and its
    exact gradient with respect to x (ReLU gates held fixed)."""
    ids = obs.params.layer_ids
    stack = _stack_arrays(obs.params)
    depth = len(stack)
    x = np.asarray(x, dtype=np.float64).ravel()
    g_w, g_b, ctx = _sample_gradients(stack, x, obs.true_label)
    acts, masks, deltas, p = ctx["acts"], ctx["masks"], ctx["deltas"], ctx["p"]

    loss = 0.0
    r_w: list[np.ndarray | None] = [None] * depth
    r_b: list[np.ndarray | None] = [None] * depth
    for i in range(depth):
        wid, bid = ids[2 * i], ids[2 * i + 1]
        if wid in obs.observed_layers:
            diff = g_w[i] - obs.grads.get(wid)
            loss += float(np.sum(diff * diff))
            r_w[i] = 2.0 * diff
        if bid in obs.observed_layers:
            diff = g_b[i] - obs.grads.get(bid)
            loss += float(np.sum(diff * diff))
            r_b[i] = 2.0 * diff

    # Adjoints of the backward-pass deltas, accumulated shallow-to-deep since
    # delta[i-1] is a function of delta[i].
    dbar = [np.zeros_like(deltas[i]) for i in range(depth)]
    for i in range(depth):
        if r_w[i] is not None:
            dbar[i] += acts[i] @ r_w[i]
        if r_b[i] is not None:
            dbar[i] += r_b[i]
        if i > 0:
            dbar[i] += (dbar[i - 1] * masks[i - 1]) @ stack[i][0]

    # Softmax closes the loop: delta[last] = p - onehot, p = softmax(z_last).
    pbar = dbar[depth - 1]
    zbar = p * (pbar - float(pbar @ p))
    for i in range(depth - 1, 0, -1):
        abar = zbar @ stack[i][0].T
        if r_w[i] is not None:
            abar = abar + deltas[i] @ r_w[i].T
        zbar = abar * masks[i - 1]
    xbar = zbar @ stack[0][0].T
    if r_w[0] is not None:
        xbar = xbar + deltas[0] @ r_w[0].T
    return loss, xbar


def idlg_reconstruct(
    obs: AttackObservation,
    steps: int,
    seed,
    *,
    step_size: float = 0.1,
    init: np.ndarray | None = None,
) -> ReconState:
    """Adaptive-moment descent on the matching objective, best iterate kept,
    candidate clamped to [0,1] after every step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    d = obs.input_dim
    x = (
        np.clip(np.asarray(init, dtype=np.float64).ravel(), 0.0, 1.0)
        if init is not None
        else rng.uniform(0.0, 1.0, d)
    )
    if x.size != d:
        raise ValueError(f"init size {x.size} != input dim {d}")
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros(d)
    v = np.zeros(d)
    best_loss, best_x = np.inf, x.copy()
    trace = []
    for t in range(1, steps + 1):
        loss, grad = matching_loss_and_input_grad(obs, x)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite matching objective at step {t}")
        trace.append(loss)
        if loss < best_loss:
            best_loss, best_x = loss, x.copy()
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = np.clip(x - step_size * m_hat / (np.sqrt(v_hat) + eps), 0.0, 1.0)
    final, _ = matching_loss_and_input_grad(obs, x)
    trace.append(final)
    if final < best_loss:
        best_loss, best_x = final, x.copy()
    return ReconState(
        recon=best_x, iterations=steps, final_loss=float(best_loss), loss_trace=tuple(trace)
    )


def psnr(original: np.ndarray, recon: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] signals, capped at 100."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(1.0 / mse))
