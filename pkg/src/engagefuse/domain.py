"""Core vocabulary, sliding windows, section assignment and annotator label fusion."""

from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Optional, Sequence

from engagefuse.errors import CoverageError, DataError, ParameterError

DEFAULT_WINDOW_S = 8.0
DEFAULT_HOP_S = 4.0

# absorbs float noise in (duration - window) / hop
_COUNT_EPS = 1e-9


class EngagementLabel(IntEnum):
    """Behavioral engagement class. The integer order is the tie-break order."""

    ON_TASK = 0
    OFF_TASK = 1

    def __str__(self) -> str:
        return _LABEL_TEXT[self]

    @classmethod
    def parse(cls, text: str) -> "EngagementLabel":
        try:
            return _TEXT_LABEL[text]
        except KeyError:
            raise DataError(f"unknown engagement label {text!r}") from None


_LABEL_TEXT = {EngagementLabel.ON_TASK: "OnTask", EngagementLabel.OFF_TASK: "OffTask"}
_TEXT_LABEL = {v: k for k, v in _LABEL_TEXT.items()}
LABELS = (EngagementLabel.ON_TASK, EngagementLabel.OFF_TASK)


class AnnotatorMark(str, Enum):
    ON_TASK = "OnTask"
    OFF_TASK = "OffTask"
    INVALID = "Invalid"

    def __str__(self) -> str:
        return self.value

    def to_label(self) -> Optional[EngagementLabel]:
        if self is AnnotatorMark.INVALID:
            return None
        return EngagementLabel.parse(self.value)

    @classmethod
    def from_label(cls, label: EngagementLabel) -> "AnnotatorMark":
        return cls(str(label))


class SectionType(str, Enum):
    INSTRUCTIONAL = "Instructional"
    ASSESSMENT = "Assessment"

    def __str__(self) -> str:
        return self.value


class Modality(str, Enum):
    APPEARANCE = "Appearance"
    CONTEXT_PERFORMANCE = "ContextPerformance"
    MOUSE = "Mouse"

    def __str__(self) -> str:
        return self.value


MODALITIES = tuple(Modality)
SECTIONS = tuple(SectionType)


def parse_enum(enum_cls, text: str):
    try:
        return enum_cls(text)
    except ValueError:
        raise DataError(f"unknown {enum_cls.__name__} {text!r}") from None


@dataclass(frozen=True)
class TimedSample:
    student_id: str
    session_id: str
    modality: Modality
    t_s: float
    channels: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.t_s) or self.t_s < 0:
            raise DataError(f"sample time must be finite and non-negative, got {self.t_s}")
        if any(not name for name in self.channels):
            raise DataError("channel names must be non-empty")


@dataclass(frozen=True)
class Window:
    index: int
    start_s: float
    end_s: float
    section: Optional[SectionType] = None

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class AnnotationSpan:
    annotator_id: str
    start_s: float
    end_s: float
    mark: AnnotatorMark

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise DataError(f"annotation span needs start < end, got [{self.start_s}, {self.end_s}]")


def window_count(duration_s: float, window_s: float = DEFAULT_WINDOW_S, hop_s: float = DEFAULT_HOP_S) -> int:
    if duration_s < window_s:
        return 0
    return int(math.floor((duration_s - window_s) / hop_s + _COUNT_EPS)) + 1


def make_windows(duration_s: float, window_s: float = DEFAULT_WINDOW_S,
                 hop_s: float = DEFAULT_HOP_S) -> list[Window]:
    """Fully contained windows ``[i*hop, i*hop + window]`` over ``[0, duration_s]``.

    A ragged tail shorter than ``window_s`` is dropped.
    """
    if not window_s > 0 or not hop_s > 0:
        raise ParameterError(f"window and hop must be positive (window={window_s}, hop={hop_s})")
    if hop_s > window_s:
        raise ParameterError(f"hop {hop_s} exceeds window {window_s}")
    if duration_s < 0:
        raise ParameterError(f"negative duration {duration_s}")
    n = window_count(duration_s, window_s, hop_s)
    return [Window(i, i * hop_s, i * hop_s + window_s) for i in range(n)]


def _overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def assign_section(window: Window, schedule: Sequence[tuple[float, float, SectionType]]) -> SectionType:
    """Section with the largest time overlap; ties go to the earlier-starting span."""
    best = None
    for start, end, section in sorted(schedule, key=lambda span: span[0]):
        ov = _overlap(window.start_s, window.end_s, start, end)
        if ov > 0 and (best is None or ov > best[0]):
            best = (ov, section)
    if best is None:
        raise CoverageError(
            f"window {window.index} [{window.start_s}, {window.end_s}] overlaps no schedule span")
    return best[1]


def _pick_mark(durations: Mapping[AnnotatorMark, float]) -> AnnotatorMark:
    top = max(durations.values())
    winners = [m for m, d in durations.items() if d == top]
    if len(winners) != 1:
        return AnnotatorMark.INVALID
    return winners[0]


def window_annotator_label(spans: Iterable[AnnotationSpan], window: Window) -> AnnotatorMark:
    """Mark covering most of the window for one annotator.

    Uncovered time counts as Invalid and an exact tie between marks yields Invalid.
    """
    durations = {m: 0.0 for m in AnnotatorMark}
    covered = 0.0
    for span in spans:
        ov = _overlap(window.start_s, window.end_s, span.start_s, span.end_s)
        if ov > 0:
            durations[span.mark] += ov
            covered += ov
    durations[AnnotatorMark.INVALID] += max(0.0, window.length - covered)
    return _pick_mark(durations)


def label_windows(spans: Sequence[AnnotationSpan], windows: Sequence[Window]) -> list[AnnotatorMark]:
    """``window_annotator_label`` for many windows, using one sort of the spans."""
    ordered = sorted(spans, key=lambda s: s.start_s)
    ends = [s.end_s for s in ordered]
    out = []
    for w in windows:
        # first span that may still overlap: end > window start
        i = bisect.bisect_right(ends, w.start_s)
        nearby = []
        while i < len(ordered) and ordered[i].start_s < w.end_s:
            nearby.append(ordered[i])
            i += 1
        out.append(window_annotator_label(nearby, w))
    return out


def fuse_annotations(marks: Sequence[AnnotatorMark]) -> Optional[EngagementLabel]:
    """2-of-3 majority over valid marks. ``None`` means the window is discarded."""
    if len(marks) != 3:
        raise ParameterError(f"expected exactly 3 annotator marks, got {len(marks)}")
    counts = Counter(m for m in marks if m is not AnnotatorMark.INVALID)
    for mark, n in counts.items():
        if n >= 2:
            return mark.to_label()
    return None
