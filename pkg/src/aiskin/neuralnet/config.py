"""Model configurations: the trainable desk-scale nets and the reference architectures."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from ..core import NUM_CLASSES
from ..errors import ConfigurationError, ShapeError
from . import layers as L


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_height: int
    input_width: int
    input_channels: int
    layers: tuple
    learning_rate: float
    iterations: int
    train_batch: int
    test_batch: int
    dropout_rate: float
    trainable: bool = True
    notes: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def input_shape(self) -> tuple:
        return (self.input_channels, self.input_height, self.input_width)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input": [self.input_channels, self.input_height, self.input_width],
            "layers": [spec.to_dict() for spec in self.layers],
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "train_batch": self.train_batch,
            "test_batch": self.test_batch,
            "dropout_rate": self.dropout_rate,
        }

    @property
    def config_hash(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")

    def shape_chain(self) -> list:
        """Validate the layer chain and return every layer's output shape."""
        if self.input_channels <= 0 or self.input_height <= 0 or self.input_width <= 0:
            raise ConfigurationError("input dimensions must be positive")
        for name in ("learning_rate", "iterations", "train_batch", "test_batch"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.layers or self.layers[-1].kind != L.SOFTMAX:
            raise ConfigurationError("the last layer must be Softmax")
        shapes = []
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            shape = L.output_shape(i, spec, shape)
            shapes.append(shape)
        if shape != (NUM_CLASSES,):
            raise ShapeError(len(self.layers) - 1, L.SOFTMAX,
                             f"softmax must cover {NUM_CLASSES} classes, got {shape}")
        return shapes

    def count_kinds(self) -> dict:
        counts: dict = {}
        for spec in self.layers:
            counts[spec.kind] = counts.get(spec.kind, 0) + 1
        return counts


def tiny_lenet(learning_rate: float = 0.02, dropout_rate: float = 0.6) -> ModelConfig:
    return ModelConfig(
        name="TinyLeNet",
        input_height=32, input_width=32, input_channels=3,
        layers=(
            L.conv2d(6, 5), L.relu(), L.maxpool2d(2),
            L.conv2d(16, 5), L.relu(), L.maxpool2d(2),
            L.dense(120), L.relu(), L.dropout(dropout_rate),
            L.dense(2), L.softmax(),
        ),
        learning_rate=learning_rate, iterations=5, train_batch=16, test_batch=64,
        dropout_rate=dropout_rate,
        notes="LeNet-5 layer pattern at 32x32",
    )


def tiny_alexnet(learning_rate: float = 0.02, dropout_rate: float = 0.6) -> ModelConfig:
    # pools after the 1st, 2nd and last convolution, as in AlexNet
    return ModelConfig(
        name="TinyAlexNet",
        input_height=32, input_width=32, input_channels=3,
        layers=(
            L.conv2d(16, 3, padding=1), L.relu(), L.maxpool2d(2),
            L.conv2d(32, 3, padding=1), L.relu(), L.maxpool2d(2),
            L.conv2d(48, 3, padding=1), L.relu(),
            L.conv2d(48, 3, padding=1), L.relu(),
            L.conv2d(32, 3, padding=1), L.relu(), L.maxpool2d(2),
            L.dense(128), L.relu(), L.dropout(dropout_rate),
            L.dense(64), L.relu(), L.dropout(dropout_rate),
            L.dense(2), L.softmax(),
        ),
        learning_rate=learning_rate, iterations=5, train_batch=16, test_batch=64,
        dropout_rate=dropout_rate,
        notes="AlexNet layer pattern at 32x32",
    )


# Reference architectures: metadata only, never built at desk scale.

LENET5 = ModelConfig(
    name="LeNet-5",
    input_height=228, input_width=228, input_channels=3,
    layers=(
        L.conv2d(6, 5), L.relu(), L.maxpool2d(2),
        L.conv2d(16, 5), L.relu(), L.maxpool2d(2),
        L.dense(120), L.relu(), L.dropout(0.6),
        L.dense(84), L.relu(), L.dropout(0.6),
        L.dense(2), L.softmax(),
    ),
    learning_rate=0.001, iterations=150, train_batch=64, test_batch=5, dropout_rate=0.6,
    trainable=False,
)

ALEXNET = ModelConfig(
    name="AlexNet",
    input_height=227, input_width=227, input_channels=3,
    layers=(
        L.conv2d(96, 11, stride=4), L.relu(), L.maxpool2d(3, 2),
        L.conv2d(256, 5, padding=2), L.relu(), L.maxpool2d(3, 2),
        L.conv2d(384, 3, padding=1), L.relu(),
        L.conv2d(384, 3, padding=1), L.relu(),
        L.conv2d(256, 3, padding=1), L.relu(), L.maxpool2d(3, 2),
        L.dense(4096), L.relu(), L.dropout(0.6),
        L.dense(4096), L.relu(), L.dropout(0.6),
        L.dense(2), L.softmax(),
    ),
    learning_rate=0.001, iterations=150, train_batch=64, test_batch=5, dropout_rate=0.6,
    trainable=False,
)


def _vgg16() -> ModelConfig:
    layers: list = []
    for channels, repeats in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for _ in range(repeats):
            layers += [L.conv2d(channels, 3, padding=1), L.relu()]
        layers.append(L.maxpool2d(2))
    layers += [
        L.dense(4096), L.relu(), L.dropout(0.6),
        L.dense(4096), L.relu(), L.dropout(0.6),
        L.dense(2), L.softmax(),
    ]
    return ModelConfig(
        name="VGG16",
        input_height=227, input_width=227, input_channels=3,
        layers=tuple(layers),
        learning_rate=0.001, iterations=200, train_batch=32, test_batch=5, dropout_rate=0.6,
        trainable=False,
    )


VGG16 = _vgg16()
TINY_LENET = tiny_lenet()
TINY_ALEXNET = tiny_alexnet()

REFERENCE_CONFIGS = (LENET5, ALEXNET, VGG16)
DEFAULT_CONFIGS = (TINY_LENET, TINY_ALEXNET) + REFERENCE_CONFIGS
