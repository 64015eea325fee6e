"""Domain types shared by every module and the prediction-entropy math."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ContractError, NormalizationError

NUM_CLASSES = 2
MIN_IMAGE_SIDE = 8
NORMALIZATION_TOLERANCE = 1e-6
DISTRIBUTION_TOLERANCE = 1e-9
VERDICT_THRESHOLD = 0.5


class SkinColorClass(IntEnum):
    LIGHT = 0
    YELLOWISH = 1
    DARK = 2


class DiseaseType(IntEnum):
    ACNES = 0
    SPOTS = 1
    BLACKHEADS = 2
    DARK_CIRCLES = 3
    CLEAN_FACE = 4

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: Union[str, int, "DiseaseType"]) -> "DiseaseType":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().upper().replace("-", "_")
        aliases = {"DARKCIRCLES": "DARK_CIRCLES", "CLEANFACE": "CLEAN_FACE"}
        return cls[aliases.get(key, key)]


DISEASE_TYPES = tuple(DiseaseType)
SKIN_COLORS = tuple(SkinColorClass)


@dataclass(frozen=True)
class DiagnosisLabel:
    disease_type: DiseaseType
    positive: bool

    def __post_init__(self):
        object.__setattr__(self, "disease_type", DiseaseType(self.disease_type))
        object.__setattr__(self, "positive", bool(self.positive))

    @property
    def class_index(self) -> int:
        """Index into a binary distribution: 1 for positive, 0 for negative."""
        return int(self.positive)


@dataclass(frozen=True)
class ImageSample:
    """Row-major 8-bit RGB image plus metadata.

    ``pixels`` holds ``width * height * 3`` bytes.
    """

    pixels: bytes
    width: int
    height: int
    sample_id: int
    skin_color: SkinColorClass
    truth_label: Optional[DiagnosisLabel] = None

    def __post_init__(self):
        if isinstance(self.pixels, (bytearray, memoryview)):
            object.__setattr__(self, "pixels", bytes(self.pixels))
        if self.width < MIN_IMAGE_SIDE or self.height < MIN_IMAGE_SIDE:
            raise ContractError(
                f"image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, "
                f"got {self.width}x{self.height}"
            )
        if len(self.pixels) != self.width * self.height * 3:
            raise ContractError(
                f"pixel buffer has {len(self.pixels)} bytes, expected "
                f"{self.width * self.height * 3}"
            )
        if not 0 <= self.sample_id < 2**64:
            raise ContractError(f"sample_id {self.sample_id} is not a 64-bit unsigned value")
        object.__setattr__(self, "skin_color", SkinColorClass(self.skin_color))

    @classmethod
    def from_array(
        cls,
        array: np.ndarray,
        sample_id: int,
        skin_color: SkinColorClass,
        truth_label: Optional[DiagnosisLabel] = None,
    ) -> "ImageSample":
        array = np.ascontiguousarray(array, dtype=np.uint8)
        if array.ndim != 3 or array.shape[2] != 3:
            raise ContractError(f"expected an HxWx3 array, got shape {array.shape}")
        h, w, _ = array.shape
        return cls(array.tobytes(), w, h, sample_id, skin_color, truth_label)

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)

    def unlabeled(self) -> "ImageSample":
        return ImageSample(self.pixels, self.width, self.height, self.sample_id, self.skin_color)


@dataclass(frozen=True)
class PredictionDistribution:
    probs: tuple
    model_version: int = 0

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise NormalizationError(f"probabilities outside [0, 1]: {probs}")
        if abs(math.fsum(probs) - 1.0) > DISTRIBUTION_TOLERANCE:
            raise NormalizationError(f"probabilities sum to {math.fsum(probs)!r}")

    @classmethod
    def from_scores(cls, row: Sequence[float], model_version: int = 0) -> "PredictionDistribution":
        """Build from a (float32) softmax row, renormalizing in double precision."""
        arr = np.clip(np.asarray(row, dtype=np.float64), 0.0, None)
        total = arr.sum()
        if not np.isfinite(total) or total <= 0:
            raise NormalizationError(f"cannot normalize scores {row!r}")
        return cls(tuple(arr / total), model_version)

    @property
    def argmax(self) -> int:
        # first maximal index on ties
        return int(np.argmax(self.probs))

    def __len__(self) -> int:
        return len(self.probs)


def shannon_entropy_bits(p: Union[PredictionDistribution, Sequence[float]]) -> float:
    """Entropy of a class distribution in bits, with 0*log2(0) taken as 0."""
    probs = p.probs if isinstance(p, PredictionDistribution) else tuple(float(x) for x in p)
    if not probs:
        raise NormalizationError("empty distribution")
    if any(not (0.0 <= x <= 1.0) for x in probs):
        raise NormalizationError(f"probabilities outside [0, 1]: {probs}")
    total = math.fsum(probs)
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
        raise NormalizationError(f"distribution sums to {total!r}")
    h = -math.fsum(x * math.log2(x) for x in probs if x > 0.0)
    # -0.0 for one-hot inputs
    return h if h > 0.0 else 0.0


@dataclass(frozen=True)
class FilterDecision:
    sample_id: int
    entropy_bits: float
    threshold_bits: float
    accepted: bool
    pseudo_label: Optional[DiagnosisLabel] = None
    # "accepted", "threshold" or "capacity" (below threshold but trimmed by the cap)
    reason: str = "accepted"


@dataclass(frozen=True)
class Verdict:
    disease_type: DiseaseType
    p_positive: float
    positive: bool
    model_version: int = 0

    @classmethod
    def from_probability(cls, disease_type, p_positive: float, model_version: int = 0) -> "Verdict":
        p_positive = float(p_positive)
        return cls(DiseaseType(disease_type), p_positive, p_positive >= VERDICT_THRESHOLD,
                   int(model_version))


def equal_weights() -> dict:
    return {d: 1.0 / len(DISEASE_TYPES) for d in DISEASE_TYPES}


def _check_weights(weights: Mapping[DiseaseType, float]) -> dict:
    weights = {DiseaseType(k): float(v) for k, v in weights.items()}
    if set(weights) != set(DISEASE_TYPES):
        raise ConfigurationError(f"weights must cover all five types, got {sorted(weights)}")
    if any(w < 0 for w in weights.values()):
        raise ConfigurationError("weights must be non-negative")
    if abs(math.fsum(weights.values()) - 1.0) > DISTRIBUTION_TOLERANCE:
        raise ConfigurationError(f"weights sum to {math.fsum(weights.values())!r}, expected 1")
    return weights


def compute_overall_score(
    verdicts: Sequence[Verdict],
    weights: Optional[Mapping[DiseaseType, float]] = None,
) -> float:
    """Skin score in [0, 100]; disease probabilities count against, clean-face for."""
    weights = _check_weights(weights if weights is not None else equal_weights())
    by_type = {v.disease_type: v for v in verdicts}
    if len(verdicts) != len(DISEASE_TYPES) or set(by_type) != set(DISEASE_TYPES):
        raise ContractError("expected exactly one verdict per disease type")
    terms = []
    for disease, verdict in by_type.items():
        good = verdict.p_positive if disease is DiseaseType.CLEAN_FACE else 1.0 - verdict.p_positive
        terms.append(weights[disease] * good)
    return min(100.0, max(0.0, 100.0 * math.fsum(terms)))


@dataclass(frozen=True)
class AnalysisReport:
    sample_id: int
    verdicts: tuple
    overall_score: float
    skin_color: SkinColorClass
    model_version: int

    def __post_init__(self):
        object.__setattr__(self, "verdicts", tuple(self.verdicts))
        object.__setattr__(self, "skin_color", SkinColorClass(self.skin_color))
        types = [v.disease_type for v in self.verdicts]
        if sorted(types) != list(DISEASE_TYPES):
            raise ContractError("a report holds exactly one verdict per disease type")
        if not 0.0 <= self.overall_score <= 100.0:
            raise ContractError(f"overall score {self.overall_score} outside [0, 100]")

    @classmethod
    def build(cls, sample_id, verdicts, skin_color, weights=None) -> "AnalysisReport":
        verdicts = sorted(verdicts, key=lambda v: v.disease_type)
        return cls(
            sample_id=sample_id,
            verdicts=tuple(verdicts),
            overall_score=compute_overall_score(verdicts, weights),
            skin_color=skin_color,
            model_version=min(v.model_version for v in verdicts),
        )

    def verdict(self, disease: DiseaseType) -> Verdict:
        return next(v for v in self.verdicts if v.disease_type == disease)


@dataclass
class Metrics:
    """Plain counters; stands in for the resource/data cognition modules."""

    counters: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def incr(self, name: str, amount: int = 1) -> None:
        with self._lock:
            self.counters[name] = self.counters.get(name, 0) + amount

    def get(self, name: str) -> int:
        with self._lock:
            return self.counters.get(name, 0)

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self.counters)
