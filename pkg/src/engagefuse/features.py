"""Per-window channel statistics and alignment of modalities into labeled instances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from engagefuse.domain import (
    MODALITIES,
    AnnotationSpan,
    EngagementLabel,
    Modality,
    SectionType,
    TimedSample,
    Window,
    assign_section,
    fuse_annotations,
    label_windows,
    make_windows,
)
from engagefuse.errors import DataError, ParameterError

STATISTICS = ("count", "mean", "std", "min", "max", "range")
SAMPLE_RATE = "sample_rate"


@dataclass(frozen=True)
class FeatureSchema:
    """Which channels each modality carries and which statistics to take per channel."""

    channels: Mapping[Modality, tuple[str, ...]]
    statistics: tuple[str, ...] = STATISTICS

    def __post_init__(self):
        unknown = set(self.statistics) - set(STATISTICS)
        if unknown:
            raise ParameterError(f"unknown statistics {sorted(unknown)}")
        if len(set(self.statistics)) != len(self.statistics):
            raise ParameterError("duplicate statistics in schema")
        for modality, chans in self.channels.items():
            if len(set(chans)) != len(chans) or any(not c for c in chans):
                raise ParameterError(f"channel names for {modality} must be unique and non-empty")

    def channels_for(self, modality: Modality) -> tuple[str, ...]:
        return tuple(self.channels.get(modality, ()))

    def names(self, modality: Modality) -> tuple[str, ...]:
        names = [f"{ch}.{stat}" for ch in self.channels_for(modality) for stat in self.statistics]
        names.append(SAMPLE_RATE)
        return tuple(names)

    def to_dict(self) -> dict:
        return {
            "channels": {str(m): list(self.channels_for(m)) for m in MODALITIES},
            "statistics": list(self.statistics),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "FeatureSchema":
        extra = set(data) - {"channels", "statistics"}
        if extra:
            raise ParameterError(f"unknown feature schema keys {sorted(extra)}")
        channels = {}
        for name, chans in data.get("channels", {}).items():
            try:
                modality = Modality(name)
            except ValueError:
                raise ParameterError(f"unknown modality {name!r} in feature schema") from None
            channels[modality] = tuple(chans)
        return cls(channels, tuple(data.get("statistics", STATISTICS)))


def infer_schema(samples: Iterable[TimedSample], statistics: Sequence[str] = STATISTICS) -> FeatureSchema:
    seen: dict[Modality, set[str]] = {m: set() for m in MODALITIES}
    for s in samples:
        seen[s.modality].update(s.channels)
    return FeatureSchema({m: tuple(sorted(seen[m])) for m in MODALITIES}, tuple(statistics))


@dataclass(frozen=True)
class FeatureVector:
    modality: Modality
    window_index: int
    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise DataError("feature names and values differ in length")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class Instance:
    student_id: str
    session_id: str
    window: Window
    features: Mapping[Modality, FeatureVector]
    label: EngagementLabel

    @property
    def section(self) -> Optional[SectionType]:
        return self.window.section

    @property
    def key(self) -> tuple[str, int]:
        return (self.session_id, self.window.index)


@dataclass(frozen=True)
class LabeledWindow:
    """A window with its fused ground truth; ``label is None`` marks a discarded window."""

    session_id: str
    student_id: str
    window: Window
    label: Optional[EngagementLabel]


def _sample_sort_key(s: TimedSample):
    return (s.t_s, tuple(sorted(s.channels.items())))


def _as_block(samples: Sequence[TimedSample], channels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Canonically ordered timestamps and an (n, channels) value block, NaN where absent."""
    ordered = sorted(samples, key=_sample_sort_key)
    times = np.fromiter((s.t_s for s in ordered), dtype=float, count=len(ordered))
    block = np.full((len(ordered), len(channels)), np.nan)
    col = {c: j for j, c in enumerate(channels)}
    for i, s in enumerate(ordered):
        for name, value in s.channels.items():
            if not math.isfinite(value):
                raise DataError(
                    f"non-finite value {value} in {s.session_id} {s.modality} t={s.t_s} channel {name!r}")
            j = col.get(name)
            if j is not None:
                block[i, j] = value
    return times, block


def _window_stats(block: np.ndarray, statistics: Sequence[str], window_len: float) -> list[float]:
    out: list[float] = []
    for j in range(block.shape[1]):
        col = block[:, j]
        vals = col[~np.isnan(col)]
        n = vals.size
        if n == 0:
            out.extend(0.0 for _ in statistics)
            continue
        lo, hi = float(vals.min()), float(vals.max())
        stats = {
            "count": float(n),
            "mean": float(vals.mean()),
            "std": float(vals.std()),
            "min": lo,
            "max": hi,
            "range": hi - lo,
        }
        out.extend(stats[s] for s in statistics)
    out.append(block.shape[0] / window_len)
    return out


def extract_features(samples: Sequence[TimedSample], window: Window, schema: FeatureSchema,
                     modality: Modality) -> FeatureVector:
    """Statistics over samples with ``start <= t < end``; an empty window gives all zeros."""
    for s in samples:
        if s.modality is not modality:
            raise DataError(f"sample of {s.modality} passed for {modality}")
    inside = [s for s in samples if window.start_s <= s.t_s < window.end_s]
    _, block = _as_block(inside, schema.channels_for(modality))
    values = _window_stats(block, schema.statistics, window.length)
    return FeatureVector(modality, window.index, schema.names(modality), tuple(values))


def extract_stream_features(samples: Sequence[TimedSample], windows: Sequence[Window],
                            schema: FeatureSchema, modality: Modality) -> list[FeatureVector]:
    """``extract_features`` over many windows of one stream, sorting the stream once."""
    for s in samples:
        if s.modality is not modality:
            raise DataError(f"sample of {s.modality} passed for {modality}")
    times, block = _as_block(samples, schema.channels_for(modality))
    names = schema.names(modality)
    out = []
    for w in windows:
        lo, hi = np.searchsorted(times, [w.start_s, w.end_s], side="left")
        values = _window_stats(block[lo:hi], schema.statistics, w.length)
        out.append(FeatureVector(modality, w.index, names, tuple(values)))
    return out


def zero_vector(modality: Modality, window_index: int, schema: FeatureSchema) -> FeatureVector:
    names = schema.names(modality)
    return FeatureVector(modality, window_index, names, (0.0,) * len(names))


def build_instances(features: Iterable[tuple[str, FeatureVector]], labels: Iterable[LabeledWindow],
                    schema: FeatureSchema) -> list[Instance]:
    """Join feature vectors to fused labels by (session, window index).

    Discarded windows are dropped; a modality with no vector gets an all-zero one.
    """
    by_key: dict[tuple[str, int], dict[Modality, FeatureVector]] = {}
    for session_id, fv in features:
        slot = by_key.setdefault((session_id, fv.window_index), {})
        if fv.modality in slot:
            raise DataError(
                f"duplicate {fv.modality} feature vector for session {session_id} window {fv.window_index}")
        slot[fv.modality] = fv

    out = []
    for lw in labels:
        if lw.label is None:
            continue
        have = by_key.get((lw.session_id, lw.window.index), {})
        feats = {m: have.get(m) or zero_vector(m, lw.window.index, schema) for m in MODALITIES}
        out.append(Instance(lw.student_id, lw.session_id, lw.window, feats, lw.label))
    out.sort(key=lambda inst: inst.key)
    return out


@dataclass
class SessionData:
    """Everything recorded for one session, as loaded from disk or simulated."""

    session_id: str
    student_id: str
    schedule: list[tuple[float, float, SectionType]]
    samples: dict[Modality, list[TimedSample]] = field(default_factory=dict)
    annotations: dict[str, list[AnnotationSpan]] = field(default_factory=dict)

    @property
    def duration_s(self) -> float:
        return max((end for _, end, _ in self.schedule), default=0.0)


def label_session(session: SessionData, windows: Sequence[Window]) -> list[LabeledWindow]:
    if len(session.annotations) != 3:
        raise DataError(
            f"session {session.session_id} has {len(session.annotations)} annotators, expected 3")
    per_annotator = [label_windows(session.annotations[a], windows) for a in sorted(session.annotations)]
    return [
        LabeledWindow(session.session_id, session.student_id, w, fuse_annotations(marks))
        for w, marks in zip(windows, zip(*per_annotator))
    ]


def extract_dataset(sessions: Iterable[SessionData], schema: FeatureSchema,
                    window_s: float = 8.0, hop_s: float = 4.0) -> list[Instance]:
    """Window, section-tag, label and featurize every session."""
    features: list[tuple[str, FeatureVector]] = []
    labels: list[LabeledWindow] = []
    for session in sessions:
        windows = [
            Window(w.index, w.start_s, w.end_s, assign_section(w, session.schedule))
            for w in make_windows(session.duration_s, window_s, hop_s)
        ]
        labels.extend(label_session(session, windows))
        for modality in MODALITIES:
            stream = session.samples.get(modality, [])
            if stream:
                features.extend((session.session_id, fv)
                                for fv in extract_stream_features(stream, windows, schema, modality))
    return build_instances(features, labels, schema)


def feature_matrix(instances: Sequence[Instance], modality: Modality) -> np.ndarray:
    if not instances:
        return np.zeros((0, 0))
    return np.array([inst.features[modality].values for inst in instances], dtype=float)


def label_array(instances: Sequence[Instance]) -> np.ndarray:
    return np.fromiter((int(inst.label) for inst in instances), dtype=np.int64, count=len(instances))
