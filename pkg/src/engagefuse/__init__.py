"""Multimodal On-Task / Off-Task engagement detection with pooled-tree fusion."""

from engagefuse.domain import (
    AnnotationSpan,
    AnnotatorMark,
    EngagementLabel,
    Modality,
    SectionType,
    TimedSample,
    Window,
)
from engagefuse.errors import (
    CoverageError,
    DataError,
    EngageError,
    ModelFormatError,
    ParameterError,
    ProtocolError,
    ReportError,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationSpan",
    "AnnotatorMark",
    "CoverageError",
    "DataError",
    "EngageError",
    "EngagementLabel",
    "Modality",
    "ModelFormatError",
    "ParameterError",
    "ProtocolError",
    "ReportError",
    "SectionType",
    "TimedSample",
    "Window",
]
