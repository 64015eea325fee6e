"""Entropy-threshold data filter with pseudo-labeling and skin-color partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import (
    NUM_CLASSES,
    DiagnosisLabel,
    DiseaseType,
    FilterDecision,
    ImageSample,
    PredictionDistribution,
    SkinColorClass,
    shannon_entropy_bits,
)
from .errors import ConfigurationError, ContractError

LIGHT_MIN_LUMINANCE = 170.0
YELLOWISH_MIN_LUMINANCE = 110.0


class Predictor(Protocol):
    """What the filter needs from a model snapshot."""

    disease_type: DiseaseType
    version: int

    def predict(self, samples: Sequence[ImageSample]) -> np.ndarray:
        """Class probabilities, shape (len(samples), M)."""


@dataclass(frozen=True)
class FilterConfig:
    threshold_bits: float = 0.3
    max_selected_per_round: int = 64

    def __post_init__(self):
        if not 0.0 <= self.threshold_bits <= math.log2(NUM_CLASSES):
            raise ConfigurationError(
                f"threshold {self.threshold_bits} outside [0, log2({NUM_CLASSES})]"
            )
        if self.max_selected_per_round <= 0:
            raise ConfigurationError("max_selected_per_round must be positive")


@dataclass(frozen=True)
class SelectionEntry:
    sample: ImageSample
    pseudo_label: DiagnosisLabel
    entropy_bits: float


@dataclass(frozen=True)
class SelectionBatch:
    round_id: int
    skin_color: SkinColorClass
    entries: tuple = field(default_factory=tuple)
    source_model_version: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "skin_color", SkinColorClass(self.skin_color))

    @property
    def disease_types(self) -> set:
        return {e.pseudo_label.disease_type for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


def mean_center_luminance(sample: ImageSample) -> float:
    arr = sample.to_array().astype(np.int64)
    h, w = sample.height, sample.width
    crop = arr[h // 4: h - h // 4, w // 4: w - w // 4]
    # integer weights in thousandths keep gray levels exact at the bucket edges
    lum = crop @ np.array([299, 587, 114])
    return float(lum.sum()) / (1000.0 * lum.size)


def classify_skin_color(sample: ImageSample) -> SkinColorClass:
    """Mean luminance of the central 50% crop, bucketed at 110 and 170."""
    lum = mean_center_luminance(sample)
    if lum >= LIGHT_MIN_LUMINANCE:
        return SkinColorClass.LIGHT
    if lum >= YELLOWISH_MIN_LUMINANCE:
        return SkinColorClass.YELLOWISH
    return SkinColorClass.DARK


def score_and_filter(samples: Sequence[ImageSample], snapshot: Predictor, config: FilterConfig,
                     round_id: int = 0):
    """Select samples whose prediction entropy is strictly below the threshold.

    Returns ``(batches, decisions)``: one :class:`SelectionBatch` per skin-color
    class that has accepted entries, and one :class:`FilterDecision` per input in
    input order. Accepted samples are pseudo-labeled with the snapshot's argmax
    class and stripped of any ground truth. When more than
    ``max_selected_per_round`` pass, the lowest-entropy ones are kept (ties by
    ascending sample_id); the overflow is rejected.
    """
    samples = list(samples)
    if not samples:
        return {}, []
    probs = np.asarray(snapshot.predict(samples), dtype=np.float64)
    if probs.ndim != 2 or probs.shape != (len(samples), NUM_CLASSES):
        raise ContractError(
            f"snapshot produced shape {probs.shape}, expected ({len(samples)}, {NUM_CLASSES})"
        )
    disease = DiseaseType(snapshot.disease_type)
    threshold = config.threshold_bits
    scored = []
    for sample, row in zip(samples, probs):
        dist = PredictionDistribution.from_scores(row, snapshot.version)
        scored.append((sample, dist, shannon_entropy_bits(dist)))

    passing = sorted(
        (k for k, (_, _, h) in enumerate(scored) if h < threshold),
        key=lambda k: (scored[k][2], scored[k][0].sample_id),
    )
    kept = set(passing[: config.max_selected_per_round])

    decisions = []
    grouped: dict = {}
    for k, (sample, dist, h) in enumerate(scored):
        if k in kept:
            label = DiagnosisLabel(disease, bool(dist.argmax == 1))
            decisions.append(FilterDecision(sample.sample_id, h, threshold, True, label))
            grouped.setdefault(sample.skin_color, []).append(
                SelectionEntry(sample.unlabeled(), label, h)
            )
        else:
            reason = "capacity" if h < threshold else "threshold"
            decisions.append(FilterDecision(sample.sample_id, h, threshold, False, None, reason))

    batches = {
        color: SelectionBatch(
            round_id=round_id,
            skin_color=color,
            entries=tuple(sorted(entries, key=lambda e: (e.entropy_bits, e.sample.sample_id))),
            source_model_version=snapshot.version,
        )
        for color, entries in sorted(grouped.items())
    }
    return batches, decisions
