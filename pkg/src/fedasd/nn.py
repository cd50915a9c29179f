"""Dense network engine over flat parameter vectors.

Parameters live in one contiguous float64 array so that federated code can
average, encrypt and diff them without caring about layer structure. Layer
``i`` owns a weight block of shape ``(out_dim, in_dim)`` stored row-major,
followed by its bias of length ``out_dim``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError, StaleCacheError


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation = Activation.IDENTITY
    dropout_after: float = 0.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if not 0.0 <= self.dropout_after < 1.0:
            raise ValueError(f"dropout_after must lie in [0, 1), got {self.dropout_after}")
        object.__setattr__(self, "activation", Activation(self.activation))


Shape = tuple[int, int, bool]


def param_shapes(specs: Sequence[LayerSpec]) -> tuple[Shape, ...]:
    _check_chain(specs)
    return tuple((s.out_dim, s.in_dim, True) for s in specs)


def _block_size(shape: Shape) -> int:
    rows, cols, has_bias = shape
    return rows * cols + (rows if has_bias else 0)


def _check_chain(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ShapeError("a network needs at least one layer")
    for prev, nxt in zip(specs, specs[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ShapeError(f"layer chain broken: {prev.out_dim} -> {nxt.in_dim}")


@dataclass
class ModelParams:
    """Flat parameter vector plus the per-layer shape descriptors."""

    values: np.ndarray
    shapes: tuple[Shape, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shapes = tuple((int(r), int(c), bool(b)) for r, c, b in self.shapes)
        if self.values.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        expected = sum(_block_size(s) for s in self.shapes)
        if self.values.size != expected:
            raise ShapeError(f"expected {expected} parameter values, got {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Views ``(W, b)`` into the flat vector, one per layer."""
        out = []
        offset = 0
        for rows, cols, has_bias in self.shapes:
            w = self.values[offset : offset + rows * cols].reshape(rows, cols)
            offset += rows * cols
            b = None
            if has_bias:
                b = self.values[offset : offset + rows]
                offset += rows
            out.append((w, b))
        return out

    def copy(self) -> ModelParams:
        return ModelParams(self.values.copy(), self.shapes)

    def with_values(self, values: np.ndarray) -> ModelParams:
        return ModelParams(values, self.shapes)

    def split(self, layer_counts: Sequence[int]) -> list[ModelParams]:
        """Cut into consecutive sub-networks holding ``layer_counts`` layers each."""
        if sum(layer_counts) != len(self.shapes):
            raise ShapeError("layer counts do not cover the parameter shapes")
        parts = []
        offset, layer = 0, 0
        for count in layer_counts:
            shapes = self.shapes[layer : layer + count]
            size = sum(_block_size(s) for s in shapes)
            parts.append(ModelParams(self.values[offset : offset + size], shapes))
            offset += size
            layer += count
        return parts

    @staticmethod
    def concat(parts: Sequence[ModelParams]) -> ModelParams:
        values = np.concatenate([p.values for p in parts])
        shapes = tuple(s for p in parts for s in p.shapes)
        return ModelParams(values, shapes)


def init_params(specs: Sequence[LayerSpec], rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    shapes = param_shapes(specs)
    chunks = []
    for rows, cols, has_bias in shapes:
        bound = 1.0 / np.sqrt(cols)
        chunks.append(rng.uniform(-bound, bound, size=rows * cols))
        if has_bias:
            chunks.append(rng.uniform(-bound, bound, size=rows))
    return ModelParams(np.concatenate(chunks), shapes)


def zero_params(specs: Sequence[LayerSpec]) -> ModelParams:
    shapes = param_shapes(specs)
    return ModelParams(np.zeros(sum(_block_size(s) for s in shapes)), shapes)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.SIGMOID:
        return _sigmoid(z)
    return z


@dataclass
class ForwardCache:
    specs: tuple[LayerSpec, ...]
    params: ModelParams
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    act: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    output: np.ndarray | None = None


def forward(
    params: ModelParams,
    specs: Sequence[LayerSpec],
    batch: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    specs = tuple(specs)
    if param_shapes(specs) != params.shapes:
        raise ShapeError("parameter shapes do not match the layer specs")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != specs[0].in_dim:
        raise ShapeError(f"batch shape {x.shape} incompatible with input dim {specs[0].in_dim}")
    if not np.all(np.isfinite(x)):
        raise NumericError("batch contains non-finite values")

    cache = ForwardCache(specs=specs, params=params)
    h = x
    for spec, (w, b) in zip(specs, params.layers()):
        cache.inputs.append(h)
        z = h @ w.T
        if b is not None:
            z = z + b
        a = _activate(spec.activation, z)
        cache.pre.append(z)
        cache.act.append(a)
        mask = None
        if training and spec.dropout_after > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            keep = 1.0 - spec.dropout_after
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
        cache.masks.append(mask)
        h = a
    cache.output = h
    return h, cache


def backward(
    cache: ForwardCache,
    loss_grad: np.ndarray,
    params: ModelParams | None = None,
    return_input_grad: bool = False,
):
    """Gradient of the loss w.r.t. the flat parameters.

    ``loss_grad`` is dL/d(output) for the batch that produced ``cache``. When
    ``params`` is given it must be the vector the cache was built from.
    """
    if cache.output is None or len(cache.pre) != len(cache.specs):
        raise StaleCacheError("cache was not produced by a completed forward pass")
    if params is not None and params.values is not cache.params.values:
        if params.shapes != cache.params.shapes or not np.array_equal(
            params.values, cache.params.values
        ):
            raise StaleCacheError("cache was built from different parameters")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != cache.output.shape:
        raise ShapeError(f"loss gradient shape {g.shape} != output shape {cache.output.shape}")

    layers = cache.params.layers()
    grads: list[np.ndarray] = [None] * (2 * len(layers))  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        spec = cache.specs[i]
        w, b = layers[i]
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        if spec.activation is Activation.RELU:
            g = g * (cache.pre[i] > 0.0)
        elif spec.activation is Activation.SIGMOID:
            a = cache.act[i]
            g = g * a * (1.0 - a)
        grads[2 * i] = (g.T @ cache.inputs[i]).ravel()
        grads[2 * i + 1] = g.sum(axis=0) if b is not None else np.empty(0)
        g = g @ w
    flat = np.concatenate(grads)
    if not np.all(np.isfinite(flat)):
        raise NumericError("gradient contains non-finite values")
    if return_input_grad:
        return flat, g
    return flat


def mse_loss(reconstruction: np.ndarray, target: np.ndarray) -> float:
    r = np.asarray(reconstruction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeError(f"shape mismatch {r.shape} vs {t.shape}")
    return float(np.mean((r - t) ** 2))


def mse_grad(reconstruction: np.ndarray, target: np.ndarray) -> np.ndarray:
    r = np.asarray(reconstruction, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeError(f"shape mismatch {r.shape} vs {t.shape}")
    return 2.0 * (r - t) / r.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, size: int, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0, beta1, beta2, epsilon)


def adam_step(
    params: ModelParams, grad: np.ndarray, state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ShapeError("gradient, moments and parameters must be aligned")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    values = params.values - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.epsilon)
    return params.with_values(values), new_state
