"""A small sequential network with explicit forward/backward passes and plain SGD."""

from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from ..errors import ContractError, IncompatibleModelError, NumericFaultError
from . import layers as L
from .config import ModelConfig
from .serialization import ModelParameters


class Model:
    """Parameters plus the config they belong to.

    ``forward(..., training=False)`` never mutates the model, so an inference-only
    instance can be shared between threads.
    """

    def __init__(self, config: ModelConfig, tensors: list, version: int = 0, seed: int = 0):
        self.config = config
        self.shapes = config.shape_chain()
        self.version = int(version)
        self.params: list = []
        tensors = list(tensors)
        pos = 0
        in_shape = config.input_shape
        for i, spec in enumerate(config.layers):
            expected = L.param_shapes(spec, in_shape)
            if expected:
                if pos + 2 > len(tensors):
                    raise IncompatibleModelError("fewer tensors than the configuration has parameters")
                w, b = tensors[pos], tensors[pos + 1]
                pos += 2
                if w.shape != expected[0] or b.shape != expected[1]:
                    raise IncompatibleModelError(
                        f"layer {i} ({spec.kind}): tensor shapes {w.shape}/{b.shape}, "
                        f"expected {expected[0]}/{expected[1]}"
                    )
                self.params.append([w, b])
            else:
                self.params.append(None)
            in_shape = self.shapes[i]
        if pos != len(tensors):
            raise IncompatibleModelError("more tensors than the configuration has parameters")
        self._rng = np.random.default_rng(seed)

    # -- construction ---------------------------------------------------------------

    @property
    def dtype(self):
        for p in self.params:
            if p is not None:
                return p[0].dtype
        return np.dtype(np.float32)

    def tensors(self) -> list:
        return [t for p in self.params if p is not None for t in p]

    def copy(self, dtype=None) -> "Model":
        dtype = dtype or self.dtype
        clone = Model(self.config, [np.array(t, dtype=dtype) for t in self.tensors()], self.version)
        clone._rng.bit_generator.state = self._rng.bit_generator.state
        return clone

    def reseed(self, seed) -> None:
        """Reset the dropout stream."""
        self._rng = np.random.default_rng(seed)

    def freeze(self) -> "Model":
        """Mark every tensor read-only; training on a frozen model raises."""
        for t in self.tensors():
            t.flags.writeable = False
        return self

    def to_parameters(self) -> ModelParameters:
        return ModelParameters(
            model_version=self.version,
            config_hash=self.config.config_hash,
            tensors=[np.array(t, dtype=np.float32) for t in self.tensors()],
        )

    @classmethod
    def from_parameters(cls, config: ModelConfig, params: ModelParameters, seed: int = 0) -> "Model":
        if params.config_hash != config.config_hash:
            raise IncompatibleModelError(
                f"parameter bundle is for config {params.config_hash:#018x}, "
                f"not {config.name} ({config.config_hash:#018x})"
            )
        return cls(config, [np.array(t, dtype=np.float32) for t in params.tensors],
                   params.model_version, seed)

    # -- passes ---------------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.config.input_shape:
            raise ContractError(
                f"batch shape {x.shape} does not match input {self.config.input_shape}"
            )
        return x.astype(self.dtype, copy=False)

    def _run(self, x: np.ndarray, training: bool, keep_cache: bool):
        """Returns (logits, caches). The final Softmax is applied by the caller."""
        x = self._check_input(x)
        caches = []
        for i, spec in enumerate(self.config.layers[:-1]):
            cache = None
            kind = spec.kind
            if kind == L.CONV2D:
                x, cache = L.conv_forward(spec, *self.params[i], x)
            elif kind == L.MAXPOOL2D:
                x, cache = L.maxpool_forward(spec, x)
            elif kind == L.DENSE:
                x, cache = L.dense_forward(*self.params[i], x)
            elif kind == L.RELU:
                cache = x > 0
                x = np.where(cache, x, 0).astype(x.dtype, copy=False)
            elif kind == L.DROPOUT:
                if training and spec.rate > 0:
                    # inverted dropout: scale at training time, identity at inference
                    keep = self._rng.random(x.shape) >= spec.rate
                    cache = keep.astype(x.dtype) / (1.0 - spec.rate)
                    x = x * cache
            else:
                raise ContractError(f"layer {i} ({kind}) may only appear last")
            if not np.all(np.isfinite(x)):
                raise NumericFaultError(f"layer {i} ({kind})")
            caches.append(cache if keep_cache else None)
        return x, caches

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Softmax class probabilities, one row per sample."""
        logits, _ = self._run(x, training, keep_cache=False)
        return L.softmax_rows(logits)

    def logits(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self._run(x, training, keep_cache=False)[0]

    def loss_and_gradients(self, x: np.ndarray, y: np.ndarray, training: bool = True):
        """Mean cross-entropy against one-hot ``y`` and its gradient per tensor."""
        logits, caches = self._run(x, training, keep_cache=True)
        y = np.asarray(y, dtype=logits.dtype)
        if y.shape != logits.shape:
            raise ContractError(f"labels of shape {y.shape} for logits {logits.shape}")
        n = logits.shape[0]
        loss = float(-(y * L.log_softmax_rows(logits)).sum() / n)
        if not np.isfinite(loss):
            raise NumericFaultError("loss", f"cross-entropy is {loss}")
        grad = (L.softmax_rows(logits) - y) / n
        grads: list = [None] * len(self.params)
        for i in range(len(self.config.layers) - 2, -1, -1):
            spec = self.config.layers[i]
            cache = caches[i]
            if spec.kind == L.CONV2D:
                grad, grads[i] = L.conv_backward(spec, self.params[i][0], cache, grad)
            elif spec.kind == L.MAXPOOL2D:
                grad, _ = L.maxpool_backward(spec, cache, grad)
            elif spec.kind == L.DENSE:
                grad, grads[i] = L.dense_backward(self.params[i][0], cache, grad)
            elif spec.kind == L.RELU:
                grad = np.where(cache, grad, 0).astype(grad.dtype, copy=False)
            elif spec.kind == L.DROPOUT and cache is not None:
                grad = grad * cache
        return loss, grads

    def sgd_step(self, grads: list, learning_rate: float) -> None:
        for p, g in zip(self.params, grads):
            if p is None:
                continue
            for tensor, gt in zip(p, g):
                tensor -= np.asarray(learning_rate * gt, dtype=tensor.dtype)

    def predict_labels(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Glorot-uniform weights, zero biases, version 0; deterministic in ``seed``."""
    shapes = config.shape_chain()
    rng = np.random.default_rng(seed)
    tensors = []
    in_shape = config.input_shape
    for i, spec in enumerate(config.layers):
        expected = L.param_shapes(spec, in_shape)
        if expected:
            limit = L.glorot_limit(spec, expected[0])
            tensors.append(rng.uniform(-limit, limit, size=expected[0]).astype(np.float32))
            tensors.append(np.zeros(expected[1], dtype=np.float32))
        in_shape = shapes[i]
    return Model(config, tensors, version=0, seed=seed)


def one_hot(labels: Iterable[int], num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(list(labels), dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def iterate_minibatches(x: np.ndarray, y: np.ndarray, batch_size: int,
                        rng: Optional[np.random.Generator] = None):
    order = np.arange(len(x)) if rng is None else rng.permutation(len(x))
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def train_epoch(model: Model, batches: Iterable, learning_rate: Optional[float] = None) -> float:
    """One pass of SGD over ``batches`` of (inputs, one-hot labels); returns mean loss."""
    lr = model.config.learning_rate if learning_rate is None else learning_rate
    total, count = 0.0, 0
    for xb, yb in batches:
        loss, grads = model.loss_and_gradients(xb, yb, training=True)
        if lr != 0:
            model.sgd_step(grads, lr)
        total += loss * len(xb)
        count += len(xb)
    return total / count if count else 0.0


def accuracy(model: Model, x: np.ndarray, labels: np.ndarray) -> float:
    if len(x) == 0:
        return 0.0
    return float(np.mean(model.predict_labels(x) == np.asarray(labels)))
