"""Algorithm load module: named classifier factories behind one contract."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .core import DISEASE_TYPES, DiseaseType
from .errors import ConfigurationError, IncompatibleModelError
from .neuralnet import (
    DEFAULT_CONFIGS,
    Model,
    ModelConfig,
    ModelParameters,
    build_model,
    deserialize_parameters,
    serialize_parameters,
    train_epoch,
)


@dataclass(frozen=True)
class ClassifierFactory:
    """Uniform build/train/forward/serialize contract for one model configuration."""

    config: ModelConfig

    @property
    def name(self) -> str:
        return self.config.name

    def build(self, seed: int) -> Model:
        if not self.config.trainable:
            raise ConfigurationError(f"{self.name} is a reference configuration and is not built")
        return build_model(self.config, seed)

    def train_epoch(self, model: Model, batches, learning_rate: Optional[float] = None) -> float:
        return train_epoch(model, batches, learning_rate)

    def forward(self, model: Model, x: np.ndarray) -> np.ndarray:
        return model.forward(x, training=False)

    def serialize(self, model: Model) -> bytes:
        return serialize_parameters(model.to_parameters())

    def deserialize(self, data: bytes, seed: int = 0) -> Model:
        params: ModelParameters = deserialize_parameters(data, self.config.config_hash)
        return Model.from_parameters(self.config, params, seed)


class AlgorithmRegistry:
    def __init__(self, configs: Iterable[ModelConfig] = DEFAULT_CONFIGS,
                 default: str = "TinyLeNet"):
        self._lock = threading.Lock()
        self._factories: dict = {}
        for config in configs:
            self.register(config)
        self._active = {d: default for d in DISEASE_TYPES}
        if default not in self._factories:
            raise ConfigurationError(f"default algorithm {default!r} is not registered")

    def register(self, config: ModelConfig) -> None:
        config.shape_chain()
        with self._lock:
            self._factories[config.name] = ClassifierFactory(config)

    def names(self) -> list:
        return sorted(self._factories)

    def get(self, name: str) -> ClassifierFactory:
        try:
            return self._factories[name]
        except KeyError:
            raise ConfigurationError(f"unknown algorithm {name!r}; known: {self.names()}") from None

    def by_hash(self, config_hash: int) -> ClassifierFactory:
        for factory in self._factories.values():
            if factory.config.config_hash == config_hash:
                return factory
        raise IncompatibleModelError(f"no registered configuration has hash {config_hash:#018x}")

    def activate(self, name: str, disease_type: Optional[DiseaseType] = None) -> None:
        factory = self.get(name)
        if not factory.config.trainable:
            raise ConfigurationError(f"{name} is metadata-only and cannot be the active algorithm")
        with self._lock:
            targets = DISEASE_TYPES if disease_type is None else (DiseaseType(disease_type),)
            for d in targets:
                self._active[d] = name

    def active(self, disease_type: DiseaseType) -> ClassifierFactory:
        return self._factories[self._active[DiseaseType(disease_type)]]
