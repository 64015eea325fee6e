"""From-scratch convolutional network engine."""

from .config import (
    ALEXNET,
    DEFAULT_CONFIGS,
    LENET5,
    REFERENCE_CONFIGS,
    TINY_ALEXNET,
    TINY_LENET,
    VGG16,
    ModelConfig,
    tiny_alexnet,
    tiny_lenet,
)
from .gradcheck import gradient_check, gradient_check_report
from .layers import LayerSpec, conv2d, dense, dropout, maxpool2d, relu, softmax
from .model import (
    Model,
    accuracy,
    build_model,
    iterate_minibatches,
    one_hot,
    train_epoch,
)
from .serialization import ModelParameters, deserialize_parameters, serialize_parameters

__all__ = [
    "ALEXNET", "DEFAULT_CONFIGS", "LENET5", "REFERENCE_CONFIGS", "TINY_ALEXNET", "TINY_LENET",
    "VGG16", "LayerSpec", "Model", "ModelConfig", "ModelParameters", "accuracy", "build_model",
    "conv2d", "dense", "deserialize_parameters", "dropout", "gradient_check",
    "gradient_check_report", "iterate_minibatches", "maxpool2d", "one_hot", "relu",
    "serialize_parameters", "softmax", "tiny_alexnet", "tiny_lenet", "train_epoch",
]
