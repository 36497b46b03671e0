"""Synthetic classroom sessions standing in for private recordings.

A two-state Markov chain (1 s steps by default) drives the true engagement
state. Each modality emits Gaussian channels whose mean/std depend on the
current section and state, and three simulated annotators label fixed
tiles of the timeline with independent flip / invalid noise.

Sub-seeds for every stream are derived with :func:`engagefuse.forest.mix_seed`:
session ``(student i, session j)`` uses ``s = mix_seed(master, i, j)``; its state
track ``mix_seed(s, 0)``, modality ``k`` emissions ``mix_seed(s, 1, k)``,
annotators ``mix_seed(s, 2)`` and per-student offsets ``mix_seed(master, i, 1 << 20)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from engagefuse.domain import (
    LABELS,
    MODALITIES,
    SECTIONS,
    AnnotationSpan,
    AnnotatorMark,
    EngagementLabel,
    Modality,
    SectionType,
    TimedSample,
    Window,
    make_windows,
)
from engagefuse.errors import ParameterError
from engagefuse.features import SessionData
from engagefuse.forest import mix_seed

_STUDENT_OFFSET_KEY = 1 << 20


@dataclass(frozen=True)
class AnnotatorNoise:
    annotator_id: str
    flip: float = 0.0
    invalid: float = 0.0

    def __post_init__(self):
        if not (0 <= self.flip <= 1 and 0 <= self.invalid <= 1):
            raise ParameterError(f"annotator {self.annotator_id}: probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class Transition:
    on_to_off: float
    off_to_on: float

    def __post_init__(self):
        if not (0 <= self.on_to_off <= 1 and 0 <= self.off_to_on <= 1):
            raise ParameterError("transition probabilities must lie in [0, 1]")


# (modality, section, state) -> channel -> (mean, std)
Emissions = Mapping[Modality, Mapping[SectionType, Mapping[EngagementLabel, Mapping[str, tuple[float, float]]]]]


@dataclass(frozen=True)
class SimConfig:
    duration_s: float
    sample_rate_hz: Mapping[Modality, float]
    schedule: tuple[tuple[float, float, SectionType], ...]
    transition: Mapping[SectionType, Transition]
    emissions: Emissions
    annotators: tuple[AnnotatorNoise, ...]
    n_students: int = 6
    sessions_per_student: int = 1
    dt_s: float = 1.0
    annotation_tile_s: float = 4.0
    student_offset_std: Mapping[Modality, float] = field(default_factory=dict)
    master_seed: int = 0
    version: int = 1

    def __post_init__(self):
        if self.duration_s <= 0 or self.dt_s <= 0 or self.annotation_tile_s <= 0:
            raise ParameterError("duration, dt and annotation tile must be positive")
        if self.n_students < 1 or self.sessions_per_student < 1:
            raise ParameterError("need at least one student and one session")
        for m in MODALITIES:
            if not self.sample_rate_hz.get(m, 0) > 0:
                raise ParameterError(f"sample rate for {m} must be positive")
        spans = sorted(self.schedule, key=lambda s: s[0])
        if not spans or spans[0][0] > 0 or spans[-1][1] < self.duration_s:
            raise ParameterError("schedule must cover [0, duration]")
        for (a0, a1, _), (b0, _, _) in zip(spans, spans[1:]):
            if b0 != a1:
                raise ParameterError("schedule spans must be contiguous and non-overlapping")
        for section in SECTIONS:
            if section not in self.transition:
                raise ParameterError(f"missing transition probabilities for {section}")
        for m in MODALITIES:
            for section in SECTIONS:
                chans = None
                for state in LABELS:
                    try:
                        table = self.emissions[m][section][state]
                    except KeyError:
                        raise ParameterError(f"missing emissions for {m}/{section}/{state}") from None
                    if chans is None:
                        chans = list(table)
                    elif list(table) != chans:
                        raise ParameterError(f"{m}/{section}: both states must list the same channels")
                    for ch, (_, std) in table.items():
                        if std < 0:
                            raise ParameterError(f"negative std for {m}/{section}/{state}/{ch}")
        if len(self.annotators) != 3:
            raise ParameterError("exactly three annotators are simulated")

    def channels(self, modality: Modality) -> tuple[str, ...]:
        first = self.emissions[modality][SECTIONS[0]][EngagementLabel.ON_TASK]
        return tuple(first)

    def section_at(self, t: np.ndarray) -> np.ndarray:
        """Index into ``SECTIONS`` for each time in ``t``."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=np.int64)
        for start, end, section in self.schedule:
            out[(t >= start) & (t < end)] = SECTIONS.index(section)
        return out

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, master_seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "n_students": self.n_students,
            "sessions_per_student": self.sessions_per_student,
            "duration_s": self.duration_s,
            "dt_s": self.dt_s,
            "annotation_tile_s": self.annotation_tile_s,
            "master_seed": self.master_seed,
            "sample_rate_hz": {str(m): self.sample_rate_hz[m] for m in MODALITIES},
            "student_offset_std": {str(m): v for m, v in self.student_offset_std.items()},
            "schedule": [{"section": str(s), "start_s": a, "end_s": b} for a, b, s in self.schedule],
            "transition": {str(s): {"on_to_off": t.on_to_off, "off_to_on": t.off_to_on}
                           for s, t in self.transition.items()},
            "emissions": {
                str(m): {str(s): {str(st): {ch: list(v) for ch, v in table.items()}
                                  for st, table in by_state.items()}
                         for s, by_state in by_section.items()}
                for m, by_section in self.emissions.items()
            },
            "annotators": [{"id": a.annotator_id, "flip": a.flip, "invalid": a.invalid}
                           for a in self.annotators],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimConfig":
        known = {"version", "n_students", "sessions_per_student", "duration_s", "dt_s",
                 "annotation_tile_s", "master_seed", "sample_rate_hz", "student_offset_std",
                 "schedule", "transition", "emissions", "annotators"}
        extra = set(data) - known
        if extra:
            raise ParameterError(f"unknown simulation config keys {sorted(extra)}")
        if data.get("version", 1) != 1:
            raise ParameterError(f"unsupported simulation config version {data.get('version')}")
        try:
            return cls(
                duration_s=float(data["duration_s"]),
                sample_rate_hz={Modality(k): float(v) for k, v in data["sample_rate_hz"].items()},
                schedule=tuple((float(s["start_s"]), float(s["end_s"]), SectionType(s["section"]))
                               for s in data["schedule"]),
                transition={SectionType(k): Transition(float(v["on_to_off"]), float(v["off_to_on"]))
                            for k, v in data["transition"].items()},
                emissions={
                    Modality(m): {
                        SectionType(s): {
                            EngagementLabel.parse(st): {ch: (float(v[0]), float(v[1])) for ch, v in table.items()}
                            for st, table in by_state.items()
                        }
                        for s, by_state in by_section.items()
                    }
                    for m, by_section in data["emissions"].items()
                },
                annotators=tuple(AnnotatorNoise(a["id"], float(a.get("flip", 0.0)), float(a.get("invalid", 0.0)))
                                 for a in data["annotators"]),
                n_students=int(data.get("n_students", 6)),
                sessions_per_student=int(data.get("sessions_per_student", 1)),
                dt_s=float(data.get("dt_s", 1.0)),
                annotation_tile_s=float(data.get("annotation_tile_s", 4.0)),
                student_offset_std={Modality(k): float(v)
                                    for k, v in data.get("student_offset_std", {}).items()},
                master_seed=int(data.get("master_seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParameterError):
                raise
            raise ParameterError(f"invalid simulation config: {exc!r}") from None


def load_sim_config(path: Union[str, Path, None] = None) -> SimConfig:
    """Read a simulation config; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("engagefuse.data").joinpath("sim_default.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"simulation config is not valid JSON: {exc}") from None
    return SimConfig.from_dict(data)


@dataclass(frozen=True)
class StateTrack:
    """True engagement state per dt step: ``states[k]`` holds on ``[t_s[k], t_s[k] + dt)``."""

    t_s: np.ndarray
    states: np.ndarray
    dt_s: float

    def __len__(self) -> int:
        return len(self.states)

    def state_at(self, t: np.ndarray) -> np.ndarray:
        k = np.floor(np.asarray(t, dtype=float) / self.dt_s).astype(np.int64)
        return self.states[np.clip(k, 0, len(self.states) - 1)]

    def majority(self, window: Window) -> EngagementLabel:
        """Majority state over steps starting inside the window; a tie counts as ON_TASK."""
        mask = (self.t_s >= window.start_s) & (self.t_s < window.end_s)
        off = int(self.states[mask].sum())
        on = int(mask.sum()) - off
        return EngagementLabel.OFF_TASK if off > on else EngagementLabel.ON_TASK


def markov_states(config: SimConfig, seed: int) -> StateTrack:
    n = int(math.floor(config.duration_s / config.dt_s + 1e-9))
    t = np.arange(n) * config.dt_s
    section = config.section_at(t)
    p_on_off = np.array([config.transition[s].on_to_off for s in SECTIONS])[section]
    p_off_on = np.array([config.transition[s].off_to_on for s in SECTIONS])[section]
    u = np.random.default_rng(seed).random(n)
    states = np.zeros(n, dtype=np.int64)
    cur = int(EngagementLabel.ON_TASK)
    for k in range(1, n):
        if cur == 0:
            cur = 1 if u[k] < p_on_off[k - 1] else 0
        else:
            cur = 0 if u[k] < p_off_on[k - 1] else 1
        states[k] = cur
    return StateTrack(t, states, config.dt_s)


def emit_modality(track: StateTrack, modality: Modality, config: SimConfig, seed: int,
                  student_id: str = "stu01", session_id: str = "stu01-s1",
                  offsets: Optional[Mapping[str, float]] = None) -> list[TimedSample]:
    """Gaussian channel readings at the modality's sample rate."""
    rate = config.sample_rate_hz[modality]
    n = int(round(config.duration_s * rate))
    t = np.arange(n) / rate
    section = config.section_at(t)
    state = track.state_at(t)
    channels = config.channels(modality)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, len(channels)))
    values = np.empty((n, len(channels)))
    for j, ch in enumerate(channels):
        mean = np.empty(n)
        std = np.empty(n)
        for s_idx, sec in enumerate(SECTIONS):
            for label in LABELS:
                mu, sd = config.emissions[modality][sec][label][ch]
                sel = (section == s_idx) & (state == int(label))
                mean[sel] = mu
                std[sel] = sd
        shift = offsets.get(ch, 0.0) if offsets else 0.0
        values[:, j] = mean + shift + std * noise[:, j]
    return [
        TimedSample(student_id, session_id, modality, float(t[i]),
                    {ch: float(values[i, j]) for j, ch in enumerate(channels)})
        for i in range(n)
    ]


def simulate_annotators(track: StateTrack, windows: Sequence[Window], noise: Sequence[AnnotatorNoise],
                        seed: int) -> list[list[AnnotationSpan]]:
    """Each annotator marks every window with its true majority state, flipped with
    probability ``flip`` and then replaced by Invalid with probability ``invalid``.
    Runs of abutting windows with the same mark merge into one span.
    """
    truth = [track.majority(w) for w in windows]
    rng = np.random.default_rng(seed)
    out = []
    for annot in noise:
        flip_u = rng.random(len(windows))
        invalid_u = rng.random(len(windows))
        spans: list[AnnotationSpan] = []
        for w, label, fu, iu in zip(windows, truth, flip_u, invalid_u):
            if fu < annot.flip:
                label = EngagementLabel(1 - int(label))
            mark = AnnotatorMark.INVALID if iu < annot.invalid else AnnotatorMark.from_label(label)
            if spans and spans[-1].mark is mark and spans[-1].end_s == w.start_s:
                spans[-1] = AnnotationSpan(annot.annotator_id, spans[-1].start_s, w.end_s, mark)
            else:
                spans.append(AnnotationSpan(annot.annotator_id, w.start_s, w.end_s, mark))
        out.append(spans)
    return out


@dataclass
class SimulatedSession:
    data: SessionData
    track: StateTrack


def student_offsets(config: SimConfig, student_idx: int) -> dict[Modality, dict[str, float]]:
    rng = np.random.default_rng(mix_seed(config.master_seed, student_idx, _STUDENT_OFFSET_KEY))
    out = {}
    for m in MODALITIES:
        sd = config.student_offset_std.get(m, 0.0)
        chans = config.channels(m)
        draws = rng.standard_normal(len(chans)) * sd
        out[m] = {ch: float(v) for ch, v in zip(chans, draws)}
    return out


def simulate_session(config: SimConfig, student_idx: int, session_idx: int) -> SimulatedSession:
    student_id = f"stu{student_idx + 1:02d}"
    session_id = f"{student_id}-s{session_idx + 1}"
    seed = mix_seed(config.master_seed, student_idx, session_idx)
    track = markov_states(config, mix_seed(seed, 0))
    offsets = student_offsets(config, student_idx)
    samples = {
        m: emit_modality(track, m, config, mix_seed(seed, 1, k), student_id, session_id, offsets[m])
        for k, m in enumerate(MODALITIES)
    }
    tiles = make_windows(config.duration_s, config.annotation_tile_s, config.annotation_tile_s)
    spans = simulate_annotators(track, tiles, config.annotators, mix_seed(seed, 2))
    annotations = {a.annotator_id: s for a, s in zip(config.annotators, spans)}
    schedule = [(a, min(b, config.duration_s), s) for a, b, s in config.schedule if a < config.duration_s]
    return SimulatedSession(SessionData(session_id, student_id, schedule, samples, annotations), track)


def simulate_dataset(config: SimConfig) -> list[SimulatedSession]:
    return [
        simulate_session(config, i, j)
        for i in range(config.n_students)
        for j in range(config.sessions_per_student)
    ]
