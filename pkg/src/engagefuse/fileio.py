"""CSV datasets, instance tables, prediction files and the JSON model bundle.

Every writer goes through ``atomic_write_*``: the payload lands in a temp
file next to the target and is renamed over it, so readers never see a
half-written file. Floats are written with ``repr`` and read back exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from engagefuse.domain import (
    MODALITIES,
    AnnotationSpan,
    AnnotatorMark,
    EngagementLabel,
    Modality,
    SectionType,
    TimedSample,
    Window,
)
from engagefuse.errors import DataError, ModelFormatError, ParameterError
from engagefuse.features import SAMPLE_RATE, FeatureSchema, FeatureVector, Instance, SessionData
from engagefuse.forest import FlatTree, Forest, ForestParams, Internal, Leaf, Split

PathLike = Union[str, Path]

SAMPLES_HEADER = ("session_id", "student_id", "modality", "t_s", "channel", "value")
ANNOTATIONS_HEADER = ("session_id", "student_id", "annotator_id", "start_s", "end_s", "mark")
SCHEDULE_HEADER = ("session_id", "start_s", "end_s", "section")
PREDICTIONS_HEADER = ("session_id", "student_id", "window_index", "section", "label", "confidence_on")
STATES_HEADER = ("session_id", "student_id", "t_s", "state")
INSTANCE_KEY_COLUMNS = ("session_id", "student_id", "window_index", "start_s", "end_s", "section", "label")

SAMPLES_FILE = "samples.csv"
ANNOTATIONS_FILE = "annotations.csv"
SCHEDULE_FILE = "schedule.csv"
STATES_FILE = "states.csv"

MODEL_FORMAT_VERSION = 1


# --- atomic writes ---------------------------------------------------------

def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


# --- reading ---------------------------------------------------------------

class _Rows:
    """Iterates a CSV as dicts, tracking the file line for error messages."""

    def __init__(self, path: PathLike, required: Sequence[str]):
        self.path = Path(path)
        self.required = tuple(required)

    def error(self, line: int, message: str) -> DataError:
        return DataError(f"{self.path}:{line}: {message}")

    def __iter__(self):
        if not self.path.exists():
            raise DataError(f"{self.path}: file not found")
        with self.path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise self.error(1, "empty file, expected a header row")
            missing = [c for c in self.required if c not in header]
            if missing:
                raise self.error(1, f"missing column(s) {', '.join(missing)}")
            self.header = header
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != len(header):
                    raise self.error(line, f"expected {len(header)} fields, got {len(row)}")
                yield line, dict(zip(header, row))

    def number(self, line: int, row: Mapping[str, str], column: str) -> float:
        text = row[column]
        try:
            value = float(text)
        except ValueError:
            raise self.error(line, f"cannot parse {column} value {text!r} as a number") from None
        if value != value or value in (float("inf"), float("-inf")):
            raise self.error(line, f"non-finite {column} value {text!r}")
        return value

    def integer(self, line: int, row: Mapping[str, str], column: str) -> int:
        text = row[column]
        try:
            return int(text)
        except ValueError:
            raise self.error(line, f"cannot parse {column} value {text!r} as an integer") from None

    def enum(self, line: int, row: Mapping[str, str], column: str, enum_cls):
        text = row[column]
        try:
            return enum_cls(text)
        except ValueError:
            raise self.error(line, f"unknown {column} {text!r}") from None

    def text(self, line: int, row: Mapping[str, str], column: str) -> str:
        value = row[column]
        if not value:
            raise self.error(line, f"empty {column}")
        return value


def load_samples(path: PathLike) -> list[TimedSample]:
    """Long-format rows merged into one sample per (session, modality, time); sorted on that key."""
    rows = _Rows(path, SAMPLES_HEADER)
    merged: dict[tuple[str, Modality, float], tuple[str, dict[str, float]]] = {}
    for line, row in rows:
        session = rows.text(line, row, "session_id")
        student = rows.text(line, row, "student_id")
        modality = rows.enum(line, row, "modality", Modality)
        t = rows.number(line, row, "t_s")
        if t < 0:
            raise rows.error(line, f"negative t_s {t}")
        channel = rows.text(line, row, "channel")
        value = rows.number(line, row, "value")
        owner, channels = merged.setdefault((session, modality, t), (student, {}))
        if owner != student:
            raise rows.error(line, f"session {session} appears under students {owner} and {student}")
        if channel in channels:
            raise rows.error(line, f"duplicate channel {channel!r} at t={t!r}")
        channels[channel] = value
    return [
        TimedSample(student, session, modality, t, channels)
        for (session, modality, t), (student, channels) in sorted(merged.items(), key=lambda kv: (
            kv[0][0], str(kv[0][1]), kv[0][2]))
    ]


def load_annotations(path: PathLike) -> list[tuple[str, str, AnnotationSpan]]:
    """(session_id, student_id, span) triples in file order."""
    rows = _Rows(path, ANNOTATIONS_HEADER)
    out = []
    for line, row in rows:
        start = rows.number(line, row, "start_s")
        end = rows.number(line, row, "end_s")
        if not start < end:
            raise rows.error(line, f"span needs start_s < end_s, got {start!r} >= {end!r}")
        span = AnnotationSpan(rows.text(line, row, "annotator_id"), start, end,
                              rows.enum(line, row, "mark", AnnotatorMark))
        out.append((rows.text(line, row, "session_id"), rows.text(line, row, "student_id"), span))
    return out


def load_schedule(path: PathLike) -> dict[str, list[tuple[float, float, SectionType]]]:
    rows = _Rows(path, SCHEDULE_HEADER)
    out: dict[str, list[tuple[float, float, SectionType]]] = {}
    for line, row in rows:
        start = rows.number(line, row, "start_s")
        end = rows.number(line, row, "end_s")
        if not start < end:
            raise rows.error(line, f"section needs start_s < end_s, got {start!r} >= {end!r}")
        out.setdefault(rows.text(line, row, "session_id"), []).append(
            (start, end, rows.enum(line, row, "section", SectionType)))
    for spans in out.values():
        spans.sort(key=lambda s: (s[0], s[1]))
    return out


def load_dataset(directory: PathLike) -> list[SessionData]:
    """Join samples, annotations and schedule of a dataset directory into sessions."""
    directory = Path(directory)
    samples = load_samples(directory / SAMPLES_FILE)
    annotations = load_annotations(directory / ANNOTATIONS_FILE)
    schedules = load_schedule(directory / SCHEDULE_FILE)

    students: dict[str, str] = {}

    def claim(session: str, student: str, source: str):
        owner = students.setdefault(session, student)
        if owner != student:
            raise DataError(f"{source}: session {session} belongs to both {owner} and {student}")

    for s in samples:
        claim(s.session_id, s.student_id, SAMPLES_FILE)
    for session, student, _ in annotations:
        claim(session, student, ANNOTATIONS_FILE)

    sessions = {}
    for session_id in sorted(set(students) | set(schedules)):
        if session_id not in schedules:
            raise DataError(f"{SCHEDULE_FILE}: no schedule for session {session_id}")
        if session_id not in students:
            raise DataError(f"session {session_id} has a schedule but no samples or annotations")
        sessions[session_id] = SessionData(session_id, students[session_id], schedules[session_id])
    for s in samples:
        sessions[s.session_id].samples.setdefault(s.modality, []).append(s)
    for session_id, _, span in annotations:
        sessions[session_id].annotations.setdefault(span.annotator_id, []).append(span)
    for data in sessions.values():
        for spans in data.annotations.values():
            spans.sort(key=lambda sp: (sp.start_s, sp.end_s))
    return list(sessions.values())


# --- dataset writing -------------------------------------------------------

def write_dataset(directory: PathLike, sessions: Sequence[SessionData],
                  states: Optional[Mapping[str, tuple[np.ndarray, np.ndarray]]] = None) -> list[Path]:
    """Write samples, annotations, schedule (and optionally true states) CSVs."""
    directory = Path(directory)
    ordered = sorted(sessions, key=lambda s: s.session_id)

    def sample_rows():
        for data in ordered:
            for modality in MODALITIES:
                for s in data.samples.get(modality, []):
                    for channel in sorted(s.channels):
                        yield (s.session_id, s.student_id, str(modality), _fmt(s.t_s), channel,
                               _fmt(s.channels[channel]))

    def annotation_rows():
        for data in ordered:
            for annotator in sorted(data.annotations):
                for span in data.annotations[annotator]:
                    yield (data.session_id, data.student_id, annotator, _fmt(span.start_s), _fmt(span.end_s),
                           str(span.mark))

    def schedule_rows():
        for data in ordered:
            for start, end, section in data.schedule:
                yield data.session_id, _fmt(start), _fmt(end), str(section)

    written = [
        atomic_write_text(directory / SAMPLES_FILE, _csv_text(SAMPLES_HEADER, sample_rows())),
        atomic_write_text(directory / ANNOTATIONS_FILE, _csv_text(ANNOTATIONS_HEADER, annotation_rows())),
        atomic_write_text(directory / SCHEDULE_FILE, _csv_text(SCHEDULE_HEADER, schedule_rows())),
    ]
    if states is not None:
        def state_rows():
            for data in ordered:
                if data.session_id not in states:
                    continue
                t, st = states[data.session_id]
                for ti, si in zip(t, st):
                    yield data.session_id, data.student_id, _fmt(ti), str(EngagementLabel(int(si)))
        written.append(atomic_write_text(directory / STATES_FILE, _csv_text(STATES_HEADER, state_rows())))
    return written


# --- instances -------------------------------------------------------------

def _feature_column(modality: Modality, name: str) -> str:
    return f"{modality}:{name}"


def instance_columns(instances: Sequence[Instance]) -> tuple[str, ...]:
    if not instances:
        return INSTANCE_KEY_COLUMNS
    first = instances[0]
    return INSTANCE_KEY_COLUMNS + tuple(
        _feature_column(m, n) for m in MODALITIES for n in first.features[m].names)


def write_instances(path: PathLike, instances: Sequence[Instance]) -> Path:
    columns = instance_columns(instances)
    names = {m: instances[0].features[m].names for m in MODALITIES} if instances else {}

    def rows():
        for inst in instances:
            row = [inst.session_id, inst.student_id, str(inst.window.index), _fmt(inst.window.start_s),
                   _fmt(inst.window.end_s), str(inst.section) if inst.section else "", str(inst.label)]
            for m in MODALITIES:
                fv = inst.features[m]
                if fv.names != names[m]:
                    raise DataError(f"instance {inst.key} has a different {m} feature layout")
                row.extend(_fmt(v) for v in fv.values)
            yield row

    return atomic_write_text(path, _csv_text(columns, rows()))


def load_instances(path: PathLike) -> list[Instance]:
    rows = _Rows(path, INSTANCE_KEY_COLUMNS)
    out = []
    layout: Optional[dict[Modality, list[tuple[str, str]]]] = None
    for line, row in rows:
        if layout is None:
            layout = {m: [] for m in MODALITIES}
            for col in rows.header[len(INSTANCE_KEY_COLUMNS):]:
                prefix, sep, name = col.partition(":")
                try:
                    modality = Modality(prefix)
                except ValueError:
                    raise rows.error(1, f"feature column {col!r} lacks a known modality prefix") from None
                if not sep or not name:
                    raise rows.error(1, f"malformed feature column {col!r}")
                layout[modality].append((col, name))
        section = row["section"]
        window = Window(rows.integer(line, row, "window_index"), rows.number(line, row, "start_s"),
                        rows.number(line, row, "end_s"),
                        rows.enum(line, row, "section", SectionType) if section else None)
        try:
            label = EngagementLabel.parse(row["label"])
        except ValueError:
            raise rows.error(line, f"unknown label {row['label']!r}") from None
        features = {
            m: FeatureVector(m, window.index, tuple(n for _, n in layout[m]),
                             tuple(rows.number(line, row, c) for c, _ in layout[m]))
            for m in MODALITIES
        }
        out.append(Instance(rows.text(line, row, "student_id"), rows.text(line, row, "session_id"),
                            window, features, label))
    return out


def schema_from_feature_names(names: Mapping[Modality, Sequence[str]]) -> FeatureSchema:
    """Recover the channel/statistic schema behind ``channel.stat`` feature names."""
    channels: dict[Modality, tuple[str, ...]] = {}
    statistics: Optional[tuple[str, ...]] = None
    for m in MODALITIES:
        got = tuple(names.get(m, (SAMPLE_RATE,)))
        if not got or got[-1] != SAMPLE_RATE:
            raise DataError(f"{m} feature names must end with {SAMPLE_RATE}")
        chans: list[str] = []
        stats: list[str] = []
        for name in got[:-1]:
            ch, _, stat = name.rpartition(".")
            if not chans or chans[-1] != ch:
                chans.append(ch)
            if len(chans) == 1:
                stats.append(stat)
        if chans:
            if statistics is None:
                statistics = tuple(stats)
            elif tuple(stats) != statistics:
                raise DataError("modalities use different feature statistics")
        channels[m] = tuple(chans)
    try:
        schema = FeatureSchema(channels, statistics) if statistics else FeatureSchema(channels)
    except ParameterError as exc:
        raise DataError(f"feature names do not follow channel.statistic: {exc}") from None
    for m in MODALITIES:
        if schema.names(m) != tuple(names.get(m, (SAMPLE_RATE,))):
            raise DataError(f"{m} feature names do not follow channel.statistic order")
    return schema


# --- predictions -----------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    session_id: str
    student_id: str
    window_index: int
    section: Optional[SectionType]
    label: EngagementLabel
    confidence_on: float


def write_predictions(path: PathLike, predictions: Sequence[Prediction]) -> Path:
    rows = ((p.session_id, p.student_id, str(p.window_index), str(p.section) if p.section else "",
             str(p.label), _fmt(p.confidence_on)) for p in predictions)
    return atomic_write_text(path, _csv_text(PREDICTIONS_HEADER, rows))


def load_predictions(path: PathLike) -> list[Prediction]:
    rows = _Rows(path, PREDICTIONS_HEADER)
    out = []
    for line, row in rows:
        try:
            label = EngagementLabel.parse(row["label"])
        except ValueError:
            raise rows.error(line, f"unknown label {row['label']!r}") from None
        out.append(Prediction(row["session_id"], row["student_id"], rows.integer(line, row, "window_index"),
                              rows.enum(line, row, "section", SectionType) if row["section"] else None,
                              label, rows.number(line, row, "confidence_on")))
    return out


# --- model bundle ----------------------------------------------------------

@dataclass
class ModelBundle:
    """Three modality forests plus what is needed to check they are applied to matching data."""

    forests: dict[Modality, Forest]
    schema: FeatureSchema
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = MODEL_FORMAT_VERSION

    def __post_init__(self):
        missing = [str(m) for m in MODALITIES if m not in self.forests]
        if missing:
            raise ParameterError(f"model bundle lacks forests for {', '.join(missing)}")
        for m in MODALITIES:
            if self.forests[m].feature_names != self.schema.names(m):
                raise ParameterError(f"{m} forest features do not match the bundle schema")


def _tree_to_json(tree: FlatTree, i: int = 0) -> dict:
    if tree.feature[i] < 0:
        return {"on": int(tree.on_count[i]), "off": int(tree.off_count[i])}
    return {
        "feature": int(tree.feature[i]),
        "threshold": float(tree.threshold[i]),
        "le": _tree_to_json(tree, int(tree.left[i])),
        "gt": _tree_to_json(tree, int(tree.right[i])),
    }


def _tree_from_json(node: Any) -> FlatTree:
    def build(n: Any):
        if not isinstance(n, dict):
            raise ModelFormatError("tree node must be an object")
        if set(n) == {"on", "off"}:
            return Leaf(int(n["on"]), int(n["off"]))
        if set(n) == {"feature", "threshold", "le", "gt"}:
            return Internal(Split(int(n["feature"]), float(n["threshold"])), build(n["le"]), build(n["gt"]))
        raise ModelFormatError(f"unrecognised tree node keys {sorted(n)}")

    return FlatTree.from_node(build(node))


def bundle_to_json(bundle: ModelBundle) -> str:
    payload = {
        "format_version": bundle.version,
        "metadata": bundle.metadata,
        "feature_schema": bundle.schema.to_dict(),
        "forests": [
            {
                "modality": str(m),
                "seed": f.seed,
                "params": f.params.to_dict(),
                "feature_names": list(f.feature_names),
                "trees": [_tree_to_json(t) for t in f.trees],
            }
            for m, f in ((m, bundle.forests[m]) for m in MODALITIES)
        ],
    }
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def bundle_from_json(text: str, expected_config_hash: Optional[str] = None) -> ModelBundle:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON (truncated?): {exc}") from None
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ModelFormatError("model file lacks a format_version")
    version = payload["format_version"]
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version!r}; this build reads version {MODEL_FORMAT_VERSION}")
    try:
        schema = FeatureSchema.from_dict(payload["feature_schema"])
        forests = {}
        for entry in payload["forests"]:
            modality = Modality(entry["modality"])
            if modality in forests:
                raise ModelFormatError(f"duplicate {modality} forest")
            forests[modality] = Forest(modality, [_tree_from_json(t) for t in entry["trees"]],
                                       tuple(entry["feature_names"]), ForestParams.from_dict(entry["params"]),
                                       int(entry["seed"]))
        bundle = ModelBundle(forests, schema, dict(payload.get("metadata", {})), version)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None
    stored = bundle.metadata.get("config_hash")
    if expected_config_hash is not None and stored != expected_config_hash:
        warnings.warn(f"model was trained under config {stored}, current config is {expected_config_hash}",
                      stacklevel=2)
    return bundle


def save_model(bundle: ModelBundle, path: PathLike) -> Path:
    return atomic_write_text(path, bundle_to_json(bundle))


def load_model(path: PathLike, expected_config_hash: Optional[str] = None) -> ModelBundle:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ModelFormatError(f"{path}: file not found") from None
    return bundle_from_json(text, expected_config_hash)
