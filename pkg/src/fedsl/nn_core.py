"""Small float64 MLP engine: Dense and ReLU layers, softmax cross-entropy, SGD.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Parameters are a
list with one ``(W, b)`` pair per Dense layer, in layer order; ``W`` has shape
``(out_dim, in_dim)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from fedsl.errors import DimensionError, NumericError, ValidationError

DType = np.float64


class LayerKind(str, enum.Enum):
    DENSE = "dense"
    RELU = "relu"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValidationError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind is LayerKind.RELU and self.in_dim != self.out_dim:
            raise ValidationError("ReLU requires in_dim == out_dim")

    @property
    def param_count(self) -> int:
        if self.kind is LayerKind.DENSE:
            return self.in_dim * self.out_dim + self.out_dim
        return 0

    @property
    def flops_fwd(self) -> int:
        if self.kind is LayerKind.DENSE:
            return 2 * self.in_dim * self.out_dim
        return self.out_dim

    @property
    def flops_bwd(self) -> int:
        if self.kind is LayerKind.DENSE:
            return 4 * self.in_dim * self.out_dim
        return self.out_dim

    def act_bits(self, precision: int) -> int:
        return self.out_dim * precision


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, in_dim, out_dim)


def relu(dim: int) -> LayerSpec:
    return LayerSpec(LayerKind.RELU, dim, dim)


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValidationError("model needs at least one layer")
        check_chain(self.layers, self.input_dim)
        if self.layers[-1].out_dim != self.num_classes:
            raise ValidationError(
                f"last layer width {self.layers[-1].out_dim} != num_classes {self.num_classes}"
            )

    @property
    def dense_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind is LayerKind.DENSE]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)


def check_chain(layers, input_dim: int) -> None:
    width = input_dim
    for i, layer in enumerate(layers):
        if layer.in_dim != width:
            raise ValidationError(f"layer {i} expects width {layer.in_dim}, got {width}")
        width = layer.out_dim


def mlp_spec(input_dim: int, hidden: list[int], num_classes: int) -> ModelSpec:
    """Dense/ReLU stack ``input -> hidden[0] -> ... -> num_classes`` (no ReLU on the logits)."""
    layers: list[LayerSpec] = []
    width = input_dim
    for h in hidden:
        layers += [dense(width, h), relu(h)]
        width = h
    layers.append(dense(width, num_classes))
    return ModelSpec(tuple(layers), input_dim, num_classes)


# Params are a list of (W, b); helpers below treat them as a flat pytree.
Params = list


def init_params(spec: ModelSpec, seed: int) -> Params:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    return init_layers(spec.layers, rng)


def init_layers(layers, rng: np.random.Generator) -> Params:
    params = []
    for layer in layers:
        if layer.kind is not LayerKind.DENSE:
            continue
        limit = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        w = rng.uniform(-limit, limit, size=(layer.out_dim, layer.in_dim))
        params.append((w, np.zeros(layer.out_dim, dtype=DType)))
    return params


def check_params(layers, params: Params) -> None:
    dense_layers = [l for l in layers if l.kind is LayerKind.DENSE]
    if len(dense_layers) != len(params):
        raise DimensionError(f"expected {len(dense_layers)} dense parameter pairs, got {len(params)}")
    for j, (layer, (w, b)) in enumerate(zip(dense_layers, params)):
        if w.shape != (layer.out_dim, layer.in_dim) or b.shape != (layer.out_dim,):
            raise DimensionError(f"dense parameter {j} has shapes {w.shape}, {b.shape}")


def forward_layers(layers, params: Params, x: np.ndarray, offset: int = 0):
    """Run ``layers`` on ``x``. Returns (output, cache); ``offset`` only labels errors."""
    h = np.asarray(x, dtype=DType)
    if h.ndim != 2:
        raise DimensionError(f"input must be 2-D [batch, width], got shape {h.shape}")
    inputs = []
    p = 0
    for i, layer in enumerate(layers):
        if h.shape[1] != layer.in_dim:
            raise DimensionError(
                f"layer {offset + i}: input width {h.shape[1]} != in_dim {layer.in_dim}"
            )
        inputs.append(h)
        if layer.kind is LayerKind.DENSE:
            w, b = params[p]
            p += 1
            h = h @ w.T + b
        else:
            h = np.maximum(h, 0.0)
    return h, inputs


def backward_layers(layers, params: Params, cache, grad_out: np.ndarray):
    """Reverse pass matching :func:`forward_layers`. Returns (grads, grad_in)."""
    if len(cache) != len(layers):
        raise RuntimeError("cache does not match layer list")
    g = np.asarray(grad_out, dtype=DType)
    grads = []
    p = len(params)
    for layer, x in zip(reversed(layers), reversed(cache)):
        if layer.kind is LayerKind.DENSE:
            p -= 1
            w, _ = params[p]
            grads.append((g.T @ x, g.sum(axis=0)))
            g = g @ w
        else:
            g = g * (x > 0.0)
    grads.reverse()
    return grads, g


def forward(spec: ModelSpec, params: Params, x: np.ndarray):
    return forward_layers(spec.layers, params, x)


def backward(spec: ModelSpec, params: Params, cache, logit_grad: np.ndarray):
    return backward_layers(spec.layers, params, cache, logit_grad)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def loss_and_grad(spec: ModelSpec, params: Params, x: np.ndarray, labels):
    logits, _ = forward(spec, params, x)
    return softmax_xent(logits, labels)


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    if lr < 0:
        raise ValidationError("learning rate must be non-negative")
    out = []
    for (w, b), (gw, gb) in zip(params, grads, strict=True):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise DimensionError("gradient shapes do not match parameters")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError("non-finite gradient")
        out.append((w - lr * gw, b - lr * gb))
    return out


def predict(spec: ModelSpec, params: Params, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(spec, params, x)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index.
    return np.argmax(logits, axis=1)


def evaluate(spec: ModelSpec, params: Params, dataset) -> float:
    if len(dataset.labels) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(spec, params, dataset.features) == dataset.labels))


def zeros_like(params: Params) -> Params:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]


def copy_params(params: Params) -> Params:
    return [(w.copy(), b.copy()) for w, b in params]


def params_equal(a: Params, b: Params) -> bool:
    return len(a) == len(b) and all(
        np.array_equal(wa, wb) and np.array_equal(ba, bb) for (wa, ba), (wb, bb) in zip(a, b)
    )


def flatten(params: Params) -> np.ndarray:
    if not params:
        return np.zeros(0, dtype=DType)
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in params])
