"""Edge/cloud closed loop for skin-condition analysis: terminal -> edge
inference and entropy filtering -> cloud retraining -> versioned model push."""

from .core import (
    DISEASE_TYPES,
    SKIN_COLORS,
    AnalysisReport,
    DiagnosisLabel,
    DiseaseType,
    FilterDecision,
    ImageSample,
    PredictionDistribution,
    SkinColorClass,
    Verdict,
    compute_overall_score,
    shannon_entropy_bits,
)
from .errors import AiSkinError
from .filter import FilterConfig, SelectionBatch, classify_skin_color, score_and_filter

__version__ = "0.1.0"

__all__ = [
    "DISEASE_TYPES", "SKIN_COLORS", "AiSkinError", "AnalysisReport", "DiagnosisLabel",
    "DiseaseType", "FilterConfig", "FilterDecision", "ImageSample", "PredictionDistribution",
    "SelectionBatch", "SkinColorClass", "Verdict", "classify_skin_color", "compute_overall_score",
    "score_and_filter", "shannon_entropy_bits",
]
