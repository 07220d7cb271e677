"""Dense numerics for the desk-scale workload.

A tanh MLP with a softmax cross-entropy head, stored as one flat parameter
vector plus a layer layout. Gradients are plain ``numpy`` arrays with the
same length as ``ModelParams.values``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError


class LayerMeta(NamedTuple):
    name: str
    depth: int
    offset: int
    length: int
    shape: tuple


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    layout: tuple

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_layers(self) -> int:
        return max(m.depth for m in self.layout)

    def view(self, meta: LayerMeta) -> np.ndarray:
        return self.values[meta.offset:meta.offset + meta.length].reshape(meta.shape)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(values, dtype=np.float64), self.layout)

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layout)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.seed)


@dataclass(frozen=True)
class DataSpec:
    M: int
    D: int
    C: int
    class_sep: float = 3.0
    noise_sigma: float = 1.0


class Block(NamedTuple):
    block_id: int
    offset: int
    length: int
    depth: int
    density: float


@dataclass(frozen=True)
class BlockIndex:
    block_size: int
    blocks: tuple

    def __len__(self):
        return len(self.blocks)

    @property
    def num_params(self) -> int:
        last = self.blocks[-1]
        return last.offset + last.length

    def lengths(self) -> np.ndarray:
        return np.array([b.length for b in self.blocks], dtype=np.int64)

    def slice(self, block_id: int) -> slice:
        b = self.blocks[block_id]
        return slice(b.offset, b.offset + b.length)


class LossResult(NamedTuple):
    loss: float
    correct: int


def make_synthetic_dataset(spec: DataSpec, seed: int) -> Dataset:
    """Gaussian mixture with class means on a sphere of radius ``class_sep``.

    Labels are balanced to within one sample per class.
    """
    M, D, C = spec.M, spec.D, spec.C
    if D < 1 or C < 2 or M < C:
        raise ConfigurationError(f"invalid dataset spec: M={M}, D={D}, C={C}")
    if spec.noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((C, D))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    means = spec.class_sep * directions / norms
    labels = rng.permutation(np.arange(M) % C)
    noise = rng.standard_normal((M, D)) * spec.noise_sigma
    features = means[labels] + noise
    return Dataset(features, labels.astype(np.int64), C, seed)


def init_model(arch: Sequence[int], seed: int) -> ModelParams:
    arch = list(arch)
    if len(arch) < 2:
        raise ConfigurationError("arch needs at least an input and an output width")
    if any(int(w) < 1 for w in arch):
        raise ConfigurationError("all layer widths must be >= 1")
    rng = np.random.default_rng(seed)
    layout = []
    chunks = []
    offset = 0
    for depth, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:]), start=1):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layout.append(LayerMeta(f"W{depth}", depth, offset, w.size, (fan_in, fan_out)))
        offset += w.size
        layout.append(LayerMeta(f"b{depth}", depth, offset, fan_out, (fan_out,)))
        offset += fan_out
        chunks.extend([w.ravel(), np.zeros(fan_out)])
    return ModelParams(np.concatenate(chunks), tuple(layout))


def _layers(params: ModelParams):
    metas = params.layout
    return [(params.view(metas[i]), params.view(metas[i + 1])) for i in range(0, len(metas), 2)]


def _check_batch(params: ModelParams, features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError("batch must be a non-empty 2-D feature matrix")
    if labels.shape != (features.shape[0],):
        raise ShapeError("labels must have one entry per sample")
    in_dim = params.layout[0].shape[0]
    if features.shape[1] != in_dim:
        raise ShapeError(f"feature dim {features.shape[1]} != model input {in_dim}")
    return features, labels


def _forward(params, features):
    acts = [features]
    layers = _layers(params)
    h = features
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss(params: ModelParams, batch) -> LossResult:
    features, labels = _check_batch(params, *batch)
    _, acts = _forward(params, features)
    logits = acts[-1]
    logp = _log_softmax(logits)
    loss = -logp[np.arange(len(labels)), labels].mean()
    correct = int((logits.argmax(axis=1) == labels).sum())
    return LossResult(float(loss), correct)


def loss_and_grad(params: ModelParams, batch):
    """Mean cross-entropy and its exact gradient in one pass."""
    features, labels = _check_batch(params, *batch)
    layers, acts = _forward(params, features)
    m = features.shape[0]
    logp = _log_softmax(acts[-1])
    loss = float(-logp[np.arange(m), labels].mean())
    delta = np.exp(logp)
    delta[np.arange(m), labels] -= 1.0
    delta /= m
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    flat = []
    for gw, gb in reversed(grads):
        flat.extend([gw.ravel(), gb])
    return loss, np.concatenate(flat)


def backward(params: ModelParams, batch) -> np.ndarray:
    return loss_and_grad(params, batch)[1]


def apply_update(params: ModelParams, update, lr: float) -> ModelParams:
    update = np.asarray(update, dtype=np.float64)
    if update.shape != params.values.shape:
        raise ShapeError(f"update length {update.shape} != params {params.values.shape}")
    if not lr > 0:
        raise ConfigurationError("lr must be positive")
    return ModelParams(params.values - lr * update, params.layout)


def partition_blocks(params: ModelParams, block_size: int) -> BlockIndex:
    if block_size < 1:
        raise ConfigurationError("block_size must be >= 1")
    n = params.size
    blocks = []
    for meta in params.layout:
        start = 0
        while start < meta.length:
            length = min(block_size, meta.length - start)
            blocks.append(Block(len(blocks), meta.offset + start, length, meta.depth, length / n))
            start += length
    return BlockIndex(block_size, tuple(blocks))
