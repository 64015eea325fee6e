"""Training drivers shared by the cloud, the CLI and the experiment harness."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ImageSample
from .dataset import to_arrays
from .errors import ConfigurationError
from .neuralnet import (
    Model,
    ModelConfig,
    accuracy,
    build_model,
    iterate_minibatches,
    one_hot,
    train_epoch,
)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    test_accuracy: float
    seconds: float


def fit(model: Model, x: np.ndarray, y: np.ndarray, epochs: int, seed: int = 0,
        batch_size: Optional[int] = None, learning_rate: Optional[float] = None,
        x_test: Optional[np.ndarray] = None, y_test: Optional[np.ndarray] = None) -> list:
    rng = np.random.default_rng(seed)
    batch_size = batch_size or model.config.train_batch
    history = []
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        batches = ((xb, one_hot(yb)) for xb, yb in iterate_minibatches(x, y, batch_size, rng))
        loss = train_epoch(model, batches, learning_rate)
        elapsed = time.perf_counter() - start
        acc = accuracy(model, x_test, y_test) if x_test is not None else float("nan")
        history.append(EpochLog(epoch, loss, acc, elapsed))
    return history


def train_baseline(config: ModelConfig, samples: Sequence[ImageSample], epochs: int,
                   seed: int = 0, version: int = 1) -> Model:
    if not config.trainable:
        raise ConfigurationError(f"{config.name} is metadata-only")
    x, y = to_arrays(samples, config.input_height, config.input_width)
    model = build_model(config, seed)
    fit(model, x, y, epochs, seed)
    model.version = version
    return model


@dataclass(frozen=True)
class BandResult:
    model: Model
    validation_accuracy: float
    train_accuracy: float
    epochs: int
    in_band: bool


def pretrain_to_band(config: ModelConfig, train: Sequence[ImageSample],
                     validation: Sequence[ImageSample], low: float = 0.75, high: float = 0.85,
                     seed: int = 0, epochs: int = 20, min_train_accuracy: float = 0.98,
                     learning_rate: Optional[float] = None) -> BandResult:
    """Train for ``epochs`` and keep the last epoch that fits its training data
    with validation accuracy in [low, high].

    The band is meant to come from a gap between the training and validation
    populations, not from stopping halfway: a half-trained model is accurate but
    not yet confident, hence the last qualifying epoch rather than the first.
    Without a qualifying epoch, the fitted epoch closest to the band is returned
    with ``in_band`` False.
    """
    x, y = to_arrays(train, config.input_height, config.input_width)
    xv, yv = to_arrays(validation, config.input_height, config.input_width)
    model = build_model(config, seed)
    rng = np.random.default_rng(seed)
    last_in_band, nearest, nearest_gap = None, None, np.inf
    for epoch in range(1, epochs + 1):
        batches = ((xb, one_hot(yb)) for xb, yb in
                   iterate_minibatches(x, y, config.train_batch, rng))
        train_epoch(model, batches, learning_rate)
        train_acc = accuracy(model, x, y)
        if train_acc < min_train_accuracy:
            continue
        acc = accuracy(model, xv, yv)
        gap = max(low - acc, acc - high, 0.0)
        if gap == 0.0:
            last_in_band = (model.copy(), acc, train_acc, epoch)
        elif gap < nearest_gap:
            nearest, nearest_gap = (model.copy(), acc, train_acc, epoch), gap
    chosen = last_in_band or nearest
    if chosen is None:
        chosen = (model, accuracy(model, xv, yv), accuracy(model, x, y), epochs)
    model, acc, train_acc, epoch = chosen
    model.version = 1
    return BandResult(model, acc, train_acc, epoch, last_in_band is not None)
