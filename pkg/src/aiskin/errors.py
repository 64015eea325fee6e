"""Exception hierarchy shared across the package."""


class AiSkinError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AiSkinError, ValueError):
    pass


class NormalizationError(AiSkinError, ValueError):
    """A probability vector does not sum to one."""


class ContractError(AiSkinError, ValueError):
    """Caller violated a precondition (e.g. mismatched class counts)."""


class ShapeError(AiSkinError, ValueError):
    def __init__(self, layer_index: int, kind: str, message: str):
        super().__init__(f"layer {layer_index} ({kind}): {message}")
        self.layer_index = layer_index
        self.kind = kind


class NumericFaultError(AiSkinError, FloatingPointError):
    def __init__(self, where: str, message: str = "non-finite values"):
        super().__init__(f"{where}: {message}")
        self.where = where


class CorruptionError(AiSkinError, ValueError):
    """Checksum, magic, or length check failed on persisted/transmitted bytes."""


class IncompatibleModelError(AiSkinError, ValueError):
    """Parameter bundle does not belong to the expected model configuration."""


class DatasetError(AiSkinError, ValueError):
    pass


class TransmissionError(AiSkinError, ConnectionError):
    def __init__(self, message: str, bytes_sent: int):
        super().__init__(f"{message} (bytes_sent={bytes_sent})")
        self.bytes_sent = bytes_sent
