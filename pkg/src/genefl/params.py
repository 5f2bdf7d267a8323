"""Named layer tensors and the dense-stack architecture they realize.

A model is an ordered set of named tensors; the order is structural (it
defines the affine stack for the forward pass and the layer indexing used
by masks, scores, and genes). Gradients share the same container type.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np


class ShapeMismatchError(ValueError):
    """Structural disagreement between two layered containers."""


class LayeredParams:
    """Ordered, named, finite real tensors with value semantics.

    Instances are treated as immutable: every operation returns a new
    container and never aliases caller-owned arrays for writing.
    """

    __slots__ = ("_layers",)

    def __init__(self, layers: Iterable[tuple[str, np.ndarray]], *, copy: bool = True):
        pairs = []
        for layer_id, tensor in layers:
            arr = np.array(tensor, copy=True) if copy else np.asarray(tensor)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in layer '{layer_id}'")
            pairs.append((str(layer_id), arr))
        ids = [k for k, _ in pairs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate layer ids: {ids}")
        self._layers = dict(pairs)

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(self._layers)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._layers.items())

    def get(self, layer_id: str) -> np.ndarray:
        try:
            return self._layers[layer_id]
        except KeyError:
            raise KeyError(f"unknown layer id '{layer_id}'") from None

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._layers

    def __len__(self) -> int:
        return len(self._layers)

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self._layers.values())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._layers.values())).dtype

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._layers.items()}

    def copy(self) -> "LayeredParams":
        return LayeredParams(self._layers.items(), copy=True)

    def astype(self, dtype) -> "LayeredParams":
        return LayeredParams(((k, t.astype(dtype)) for k, t in self._layers.items()), copy=False)

    def zeros_like(self) -> "LayeredParams":
        return LayeredParams(
            ((k, np.zeros_like(t)) for k, t in self._layers.items()), copy=False
        )

    def congruent_with(self, other: "LayeredParams") -> bool:
        return self.layer_ids == other.layer_ids and all(
            self._layers[k].shape == other._layers[k].shape for k in self._layers
        )

    def require_congruent(self, other: "LayeredParams", context: str = "") -> None:
        prefix = f"{context}: " if context else ""
        if self.layer_ids != other.layer_ids:
            raise ShapeMismatchError(
                f"{prefix}layer ids differ: {self.layer_ids} vs {other.layer_ids}"
            )
        for k in self._layers:
            a, b = self._layers[k].shape, other._layers[k].shape
            if a != b:
                raise ShapeMismatchError(f"{prefix}layer '{k}' shape {a} vs {b}")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "LayeredParams":
        return LayeredParams(((k, fn(t)) for k, t in self._layers.items()), copy=False)

    def combine(
        self, other: "LayeredParams", fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    ) -> "LayeredParams":
        self.require_congruent(other)
        return LayeredParams(
            ((k, fn(t, other._layers[k])) for k, t in self._layers.items()), copy=False
        )

    def allclose(self, other: "LayeredParams", **kwargs) -> bool:
        return self.congruent_with(other) and all(
            np.allclose(t, other._layers[k], **kwargs) for k, t in self._layers.items()
        )

    def equals_exact(self, other: "LayeredParams") -> bool:
        return self.congruent_with(other) and all(
            np.array_equal(t, other._layers[k]) for k, t in self._layers.items()
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}:{t.shape}" for k, t in self._layers.items())
        return f"LayeredParams({inner})"


# Gradients are shape-congruent with the model they differentiate, so they
# reuse the same container type.
GradientSet = LayeredParams


@dataclass(frozen=True)
class Architecture:
    """Dense ReLU stack: dims[0] inputs -> hidden layers -> dims[-1] logits.

    Each affine unit contributes two named parameter tensors (weight, bias),
    which are the granularity of all masks, scores, and genes.
    """

    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.dims) < 2:
            raise ValueError("architecture needs at least input and output dims")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"all dims must be positive, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def num_units(self) -> int:
        """Number of named parameter tensors (weights + biases)."""
        return 2 * (len(self.dims) - 1)

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def layer_ids(self) -> tuple[str, ...]:
        ids = []
        for i in range(len(self.dims) - 1):
            ids.append(f"fc{i + 1}.weight")
            ids.append(f"fc{i + 1}.bias")
        return tuple(ids)

    def shape_of(self, layer_id: str) -> tuple[int, ...]:
        for i in range(len(self.dims) - 1):
            if layer_id == f"fc{i + 1}.weight":
                return (self.dims[i], self.dims[i + 1])
            if layer_id == f"fc{i + 1}.bias":
                return (self.dims[i + 1],)
        raise KeyError(f"unknown layer id '{layer_id}'")

    @property
    def param_count(self) -> int:
        return sum(
            self.dims[i] * self.dims[i + 1] + self.dims[i + 1]
            for i in range(len(self.dims) - 1)
        )


def init_params(
    arch: Architecture,
    seed,
    *,
    inherit: Mapping[str, np.ndarray] | None = None,
    dtype=np.float32,
) -> LayeredParams:
    """Fan-in-scaled uniform initialization, optionally inheriting layers.

    Layers named in `inherit` are copied verbatim and consume no randomness;
    all other layers draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in a fixed
    per-layer order, so inherited layers do not shift the stream of the rest.
    """
    inherit = inherit or {}
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, np.ndarray]] = []
    for i in range(len(arch.dims) - 1):
        fan_in, fan_out = arch.dims[i], arch.dims[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        for layer_id, shape in (
            (f"fc{i + 1}.weight", (fan_in, fan_out)),
            (f"fc{i + 1}.bias", (fan_out,)),
        ):
            if layer_id in inherit:
                tensor = np.asarray(inherit[layer_id])
                if tensor.shape != shape:
                    raise ShapeMismatchError(
                        f"inherited layer '{layer_id}' has shape {tensor.shape}, "
                        f"architecture expects {shape}"
                    )
                layers.append((layer_id, tensor.astype(dtype)))
            else:
                layers.append((layer_id, rng.uniform(-bound, bound, shape).astype(dtype)))
    return LayeredParams(layers, copy=False)


def zeros_params(arch: Architecture, dtype=np.float32) -> LayeredParams:
    return LayeredParams(
        ((lid, np.zeros(arch.shape_of(lid), dtype=dtype)) for lid in arch.layer_ids),
        copy=False,
    )
