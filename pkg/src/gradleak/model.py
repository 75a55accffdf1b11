"""Fully-connected ReLU networks with closed-form gradients.

Layer convention: ``weights[i]`` is ``W_i`` with shape ``(dims[i+1], dims[i])``.
ReLU layer ``l`` (1-based, ``l = 1 .. H``) follows ``W_{l-1}``; the last
weight matrix ``W_H`` produces the logits. Activation masks are stored per
ReLU layer in ``masks[l - 1]``. Class labels are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AlreadyLinear, EmptyBatch, NonFinite, ShapeMismatch


@dataclass(frozen=True)
class FcnParams:
    dims: tuple
    weights: tuple
    biases: tuple
    first_layer_relu: bool = True
    seed: int | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeMismatch(f"invalid dims {dims}")
        if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
            raise ShapeMismatch("need one weight matrix and bias per layer")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeMismatch(f"layer {i}: W{w.shape}, b{b.shape} vs dims {dims}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFinite(f"layer {i} has non-finite parameters")

    @property
    def depth(self) -> int:
        """Number of ReLU layers ``H``."""
        return len(self.weights) - 1

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    raster_shape: tuple | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeMismatch("one label per input required")
        if not np.all(np.isfinite(self.inputs)):
            raise NonFinite("batch inputs contain NaN or Inf")
        if self.raster_shape is not None:
            self.raster_shape = tuple(int(s) for s in self.raster_shape)
            if int(np.prod(self.raster_shape)) != self.inputs.shape[1]:
                raise ShapeMismatch(
                    f"raster shape {self.raster_shape} does not match d0={self.inputs.shape[1]}"
                )

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def __len__(self):
        return self.size

    def check_box(self) -> bool:
        return bool(np.all(np.abs(self.inputs) <= 1.0))

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.inputs[idx], self.labels[idx], self.raster_shape)


@dataclass
class ActivationPattern:
    """Binary activation masks, ``masks[l-1][m, j]`` for ReLU layer ``l``."""

    masks: list
    diagnostics: dict = field(default_factory=dict)
    # last-layer neuron -> alternative membership columns that all fit
    candidates: dict = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.masks[0].shape[0] if self.masks else 0

    @property
    def depth(self) -> int:
        return len(self.masks)

    def layer(self, l: int) -> np.ndarray:
        return self.masks[l - 1]

    def sample(self, m: int) -> list:
        return [mk[m] for mk in self.masks]

    def equals(self, other: "ActivationPattern") -> bool:
        return len(self.masks) == len(other.masks) and all(
            np.array_equal(a, b) for a, b in zip(self.masks, other.masks)
        )


@dataclass
class LossVector:
    g: np.ndarray
    probs: np.ndarray | None = None


@dataclass
class GradientBundle:
    weight_grads: list
    bias_grads: list
    mask: list | None = None
    batch_size_hint: int | None = None

    def __post_init__(self):
        self.weight_grads = [np.asarray(w, dtype=np.float64) for w in self.weight_grads]
        self.bias_grads = [np.asarray(b, dtype=np.float64) for b in self.bias_grads]
        if self.mask is not None:
            self.mask = [None if mk is None else np.asarray(mk, dtype=bool) for mk in self.mask]
            for mk, w in zip(self.mask, self.weight_grads):
                if mk is not None and mk.shape != w.shape:
                    raise ShapeMismatch("mask shape must match its weight gradient")

    def available(self, i: int) -> np.ndarray:
        """Availability mask of weight-gradient layer ``i`` (all True if unmasked)."""
        if self.mask is None or self.mask[i] is None:
            return np.ones(self.weight_grads[i].shape, dtype=bool)
        return self.mask[i]

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weight_grads, self.bias_grads):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def global_norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def check_shapes(self, params: FcnParams) -> None:
        if len(self.weight_grads) != len(params.weights):
            raise ShapeMismatch("gradient depth does not match the model")
        for w, g, b, gb in zip(params.weights, self.weight_grads, params.biases, self.bias_grads):
            if w.shape != g.shape or b.shape != gb.shape:
                raise ShapeMismatch("gradient shapes do not match the model")


def generate_model(dims, seed: int, bias_mean: float = 0.0, first_layer_relu: bool = True) -> FcnParams:
    """Random Gaussian model, std ``1/sqrt(fan_in)`` for weights and biases.

    ``bias_mean`` shifts every hidden-layer bias; a negative shift makes the
    ReLUs fire sparsely, which makes exclusive activation far more common.
    """
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i in range(len(dims) - 1):
        std = 1.0 / np.sqrt(dims[i])
        weights.append(rng.normal(0.0, std, size=(dims[i + 1], dims[i])))
        b = rng.normal(0.0, std, size=dims[i + 1])
        if i < len(dims) - 2:
            b = b + bias_mean
        biases.append(b)
    return FcnParams(dims, tuple(weights), tuple(biases), first_layer_relu, seed)


def _relu_mask(params: FcnParams, layer: int, z: np.ndarray) -> np.ndarray:
    if layer == 1 and not params.first_layer_relu:
        return np.ones(z.shape, dtype=bool)
    return z > 0.0


def forward_trace(params: FcnParams, inputs: np.ndarray):
    """Batched forward pass.

    Returns ``(logits, hidden, masks)`` where ``hidden[i]`` is the input to
    ``W_i`` (``hidden[0]`` is the data) and ``masks[l-1]`` the layer-``l`` mask.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise ShapeMismatch(f"input dim {x.shape[1]} != d0 {params.input_dim}")
    hidden = [x]
    masks = []
    h = x
    for i in range(params.depth):
        z = h @ params.weights[i].T + params.biases[i]
        mk = _relu_mask(params, i + 1, z)
        masks.append(mk)
        h = np.where(mk, z, 0.0)
        hidden.append(h)
    logits = h @ params.weights[-1].T + params.biases[-1]
    return logits, hidden, masks


def forward(params: FcnParams, x):
    """Logits and per-layer masks for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch("forward expects a single input vector")
    logits, _, masks = forward_trace(params, x[None, :])
    return logits[0], [mk[0] for mk in masks]


def pattern_of(params: FcnParams, batch: Batch) -> ActivationPattern:
    _, _, masks = forward_trace(params, batch.inputs)
    return ActivationPattern(masks)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))


def loss_and_vector(logits, y: int):
    """Cross-entropy loss and its derivative w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[0]:
        raise ShapeMismatch(f"label {y} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    p = np.exp(z - log_norm)
    g = p.copy()
    g[y] -= 1.0
    return float(log_norm - z[y]), LossVector(g, p)


def loss_vectors(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g


def backprop_vectors(params: FcnParams, masks, g: np.ndarray) -> list:
    """Backprop signals ``deltas[i]`` = dloss/d(pre-activation fed by W_{i-1}).

    ``deltas[H+1]`` is the loss vector itself; ``deltas[l]`` for ReLU layer
    ``l`` is ``D_l W_l^T ... D_H W_H^T g``. Works on row-stacked samples.
    """
    H = params.depth
    deltas = [None] * (H + 2)
    deltas[H + 1] = g
    d = g
    for l in range(H, 0, -1):
        d = (d @ params.weights[l]) * masks[l - 1]
        deltas[l] = d
    return deltas


def _batch_grads(params: FcnParams, inputs: np.ndarray, labels: np.ndarray):
    logits, hidden, masks = forward_trace(params, inputs)
    g = loss_vectors(logits, labels)
    deltas = backprop_vectors(params, masks, g)
    return hidden, deltas


def per_sample_gradient(params: FcnParams, x, y: int) -> GradientBundle:
    """Exact gradient of the cross-entropy loss of one sample."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise ShapeMismatch(f"expected input of length {params.input_dim}")
    if not 0 <= y < params.n_classes:
        raise ShapeMismatch(f"label {y} out of range")
    hidden, deltas = _batch_grads(params, x[None, :], np.array([y]))
    wg = [np.outer(deltas[i + 1][0], hidden[i][0]) for i in range(params.depth + 1)]
    bg = [deltas[i + 1][0].copy() for i in range(params.depth + 1)]
    return GradientBundle(wg, bg, batch_size_hint=1)


def average_gradient(params: FcnParams, batch: Batch) -> GradientBundle:
    """Coordinate-wise mean of the per-sample gradients over ``batch``."""
    if batch.size == 0:
        raise EmptyBatch("cannot average over an empty batch")
    if np.any(batch.labels < 0) or np.any(batch.labels >= params.n_classes):
        raise ShapeMismatch("batch label out of range")
    M = batch.size
    hidden, deltas = _batch_grads(params, batch.inputs, batch.labels)
    wg = [deltas[i + 1].T @ hidden[i] / M for i in range(params.depth + 1)]
    bg = [deltas[i + 1].mean(axis=0) for i in range(params.depth + 1)]
    return GradientBundle(wg, bg, batch_size_hint=M)


def remove_first_relu(params: FcnParams) -> FcnParams:
    if not params.first_layer_relu:
        raise AlreadyLinear("first ReLU layer already removed")
    if params.depth < 1:
        raise AlreadyLinear("model has no ReLU layer")
    return replace(params, first_layer_relu=False)


def dpsgd_obfuscate(grad: GradientBundle, clip_norm: float, sigma: float, rng_seed: int) -> GradientBundle:
    """Clip to global L2 norm ``clip_norm`` and add N(0, (sigma*clip_norm)^2) noise."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(rng_seed)
    norm = grad.global_norm()
    scale = min(1.0, clip_norm / norm) if norm > 0 else 1.0
    std = sigma * clip_norm

    def obf(a):
        out = a * scale
        if std > 0:
            out = out + rng.normal(0.0, std, size=a.shape)
        return out

    wg, bg = [], []
    for w, b in zip(grad.weight_grads, grad.bias_grads):
        wg.append(obf(w))
        bg.append(obf(b))
    return GradientBundle(wg, bg, mask=grad.mask, batch_size_hint=grad.batch_size_hint)
