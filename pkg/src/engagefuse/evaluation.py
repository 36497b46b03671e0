"""Evaluation protocol: LOSO / per-student holdout splits, balancing, F1 metrics and the results table.

Averaging order is fixed: F1 values are averaged over repeats within a
student first, then over students (sorted by id). Parallel execution only
changes where tasks run, never the reduction order.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from engagefuse.config import RunConfig
from engagefuse.domain import LABELS, MODALITIES, SECTIONS, EngagementLabel, Modality, SectionType
from engagefuse.errors import ParameterError, ProtocolError, ReportError
from engagefuse.features import Instance, feature_matrix, label_array
from engagefuse.forest import Forest, ForestParams, mix_seed, train_forest
from engagefuse.fusion import pool_trees

FUSION = "Fusion"
MODELS = tuple(str(m) for m in MODALITIES) + (FUSION,)
CLASS_ROWS = ("OnTask", "OffTask", "Overall")

MODEL_HEADERS = {"Appearance": "Appr", "ContextPerformance": "CP", "Mouse": "Ms", FUSION: "FUSION"}
CLASS_HEADERS = {"OnTask": "On-Task", "OffTask": "Off-Task", "Overall": "OVERALL"}
SECTION_HEADERS = {SectionType.INSTRUCTIONAL: "INSTR.", SectionType.ASSESSMENT: "ASSESS."}


class UndefinedF1Warning(UserWarning):
    """F1 requested for a class with no true or predicted instances."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts with ON_TASK as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, predicted, truth) -> "ConfusionMatrix":
        p = np.asarray([int(v) for v in predicted], dtype=np.int64)
        t = np.asarray([int(v) for v in truth], dtype=np.int64)
        if p.shape != t.shape:
            raise ParameterError("prediction and truth lengths differ")
        on = int(EngagementLabel.ON_TASK)
        return cls(
            tp=int(np.sum((p == on) & (t == on))),
            fp=int(np.sum((p == on) & (t != on))),
            fn=int(np.sum((p != on) & (t == on))),
            tn=int(np.sum((p != on) & (t != on))),
        )

    def for_class(self, label: EngagementLabel) -> "ConfusionMatrix":
        """The same counts seen with ``label`` as the positive class."""
        if label is EngagementLabel.ON_TASK:
            return self
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def support(self, label: EngagementLabel) -> int:
        m = self.for_class(label)
        return m.tp + m.fn


def f1_from_confusion(m: ConfusionMatrix) -> float:
    """2tp / (2tp + fp + fn); 0 with a warning when the class never occurs."""
    denom = 2 * m.tp + m.fp + m.fn
    if denom == 0:
        warnings.warn("F1 undefined (tp = fp = fn = 0); using 0", UndefinedF1Warning, stacklevel=2)
        return 0.0
    return 2 * m.tp / denom


def overall_f1(per_class_f1: Mapping[Any, float], supports: Mapping[Any, float],
               scheme: str = "weighted") -> float:
    if scheme == "macro":
        return sum(per_class_f1.values()) / len(per_class_f1)
    if scheme == "weighted":
        total = sum(supports[k] for k in per_class_f1)
        if total <= 0:
            raise ParameterError("weighted F1 needs positive total support")
        return sum(per_class_f1[k] * supports[k] for k in per_class_f1) / total
    raise ParameterError(f"unknown overall F1 scheme {scheme!r}")


def class_scores(m: ConfusionMatrix, scheme: str = "weighted") -> dict[str, float]:
    f1 = {label: f1_from_confusion(m.for_class(label)) for label in LABELS}
    supports = {label: m.support(label) for label in LABELS}
    return {
        "OnTask": f1[EngagementLabel.ON_TASK],
        "OffTask": f1[EngagementLabel.OFF_TASK],
        "Overall": overall_f1(f1, supports, scheme),
    }


@dataclass
class Fold:
    test_student: str
    train_instances: list[Instance]
    test_instances: list[Instance]


def loso_folds(instances: Sequence[Instance]) -> list[Fold]:
    students = sorted({inst.student_id for inst in instances})
    if len(students) < 2:
        raise ProtocolError(f"leave-one-subject-out needs >= 2 students, got {len(students)}")
    return [
        Fold(
            s,
            [inst for inst in instances if inst.student_id != s],
            [inst for inst in instances if inst.student_id == s],
        )
        for s in students
    ]


def holdout_split_per_student(instances: Sequence[Instance],
                              train_fraction: float = 0.8) -> tuple[list[Instance], list[Instance]]:
    """Chronological split: each student's first ceil(fraction * n) windows train, the rest test."""
    if not 0 < train_fraction < 1:
        raise ParameterError("train_fraction must lie in (0, 1)")
    by_student: dict[str, list[Instance]] = defaultdict(list)
    for inst in instances:
        by_student[inst.student_id].append(inst)
    train, test = [], []
    for student in sorted(by_student):
        rows = sorted(by_student[student], key=lambda inst: inst.key)
        cut = math.ceil(train_fraction * len(rows))
        train.extend(rows[:cut])
        test.extend(rows[cut:])
    return train, test


def balance(train: Sequence[Instance], seed: int, fold_name: str = "") -> list[Instance]:
    """Undersample the majority class at random down to the minority count.

    The subset keeps the input order.
    """
    idx = {label: [i for i, inst in enumerate(train) if inst.label is label] for label in LABELS}
    missing = [str(label) for label in LABELS if not idx[label]]
    if missing:
        where = f" in fold {fold_name}" if fold_name else ""
        raise ProtocolError(f"cannot balance{where}: class {', '.join(missing)} absent from training set")
    n_min = min(len(v) for v in idx.values())
    rng = np.random.default_rng(seed)
    keep: list[int] = []
    for label in LABELS:
        members = idx[label]
        if len(members) > n_min:
            chosen = rng.choice(len(members), size=n_min, replace=False)
            members = [members[i] for i in chosen]
        keep.extend(members)
    return [train[i] for i in sorted(keep)]


@dataclass
class RepeatResult:
    """Predictions of every model on a fold's test set for one balancing repeat."""

    repeat: int
    seed: int
    truth: np.ndarray
    predictions: dict[str, np.ndarray]
    students: list[str]
    fusion_on_fraction: Optional[np.ndarray] = None


def train_modality_forests(train: Sequence[Instance], params: Mapping[Modality, ForestParams],
                           seed: int) -> dict[Modality, Forest]:
    y = label_array(train)
    forests = {}
    for k, modality in enumerate(MODALITIES):
        names = train[0].features[modality].names
        forests[modality] = train_forest(feature_matrix(train, modality), y, params[modality],
                                         mix_seed(seed, k), modality, names)
    return forests


def predict_models(forests: Mapping[Modality, Forest], instances: Sequence[Instance],
                   fusion: bool = True) -> tuple[dict[str, np.ndarray], Optional[np.ndarray]]:
    X = {m: feature_matrix(instances, m) for m in MODALITIES}
    preds = {str(m): forests[m].predict_batch(X[m]) for m in MODALITIES}
    on_fraction = None
    if fusion:
        votes = pool_trees(forests).votes_batch(X)
        preds[FUSION] = (votes[:, 1] > votes[:, 0]).astype(np.int64)
        on_fraction = votes[:, 0] / votes.sum(axis=1)
    return preds, on_fraction


def run_repeats(fold: Fold, k: int = 10, base_seed: int = 0,
                params: Optional[Mapping[Modality, ForestParams]] = None,
                fusion: bool = True) -> list[RepeatResult]:
    """Balance, train the three modality forests (and their fusion), predict the test set; k times.

    Repeat ``j`` balances with ``mix_seed(base_seed, j, 0)`` and trains with
    ``mix_seed(base_seed, j, 1)``.
    """
    if k < 1:
        raise ParameterError("k must be at least 1")
    if params is None:
        params = {m: ForestParams() for m in MODALITIES}
    truth = label_array(fold.test_instances)
    students = [inst.student_id for inst in fold.test_instances]
    results = []
    for j in range(k):
        subset = balance(fold.train_instances, mix_seed(base_seed, j, 0), fold.test_student)
        forests = train_modality_forests(subset, params, mix_seed(base_seed, j, 1))
        preds, on_fraction = predict_models(forests, fold.test_instances, fusion)
        results.append(RepeatResult(j, mix_seed(base_seed, j, 0), truth, preds, students, on_fraction))
    return results


def score_repeats(results: Sequence[RepeatResult], scheme: str = "weighted") -> dict[str, dict[str, dict[str, float]]]:
    """student -> model -> class row -> F1, averaged over repeats."""
    sums: dict[str, dict[str, dict[str, float]]] = {}
    for res in results:
        students = np.asarray(res.students)
        for student in sorted(set(res.students)):
            mask = students == student
            cell = sums.setdefault(student, {})
            for model, pred in res.predictions.items():
                m = ConfusionMatrix.from_predictions(pred[mask], res.truth[mask])
                row = cell.setdefault(model, {c: 0.0 for c in CLASS_ROWS})
                for c, v in class_scores(m, scheme).items():
                    row[c] += v
    n = len(results)
    return {s: {model: {c: v / n for c, v in rows.items()} for model, rows in cell.items()}
            for s, cell in sums.items()}


@dataclass
class MetricsReport:
    """Results-table F1 values: (section, model, class row) -> F1."""

    cells: dict[tuple[str, str, str], float]
    metadata: dict[str, Any] = field(default_factory=dict)
    sections: tuple[str, ...] = tuple(str(s) for s in SECTIONS)
    models: tuple[str, ...] = MODELS

    def value(self, section, model, row: str = "Overall") -> float:
        return self.cells[(str(section), str(model), row)]

    def to_json(self) -> str:
        payload = {
            "metadata": self.metadata,
            "sections": list(self.sections),
            "models": list(self.models),
            "cells": [
                {"section": s, "model": m, "class": c, "f1": self.cells[(s, m, c)]}
                for s in self.sections for m in self.models for c in CLASS_ROWS
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        try:
            payload = json.loads(text)
            cells = {(c["section"], c["model"], c["class"]): float(c["f1"]) for c in payload["cells"]}
            return cls(cells, payload.get("metadata", {}), tuple(payload["sections"]), tuple(payload["models"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"malformed metrics file: {exc}") from None

    def to_long_csv(self) -> str:
        lines = ["section,model,class,f1"]
        for s in self.sections:
            for m in self.models:
                for c in CLASS_ROWS:
                    lines.append(f"{s},{m},{c},{self.cells[(s, m, c)]!r}")
        return "\n".join(lines) + "\n"

    def table_rows(self) -> list[list[str]]:
        """One row per (section, class) with values rounded to 2 decimals."""
        rows = []
        for s in self.sections:
            head = SECTION_HEADERS[SectionType(s)] if s in _SECTION_NAMES else s
            for c in CLASS_ROWS:
                rows.append([head, CLASS_HEADERS[c]] + [f"{self.cells[(s, m, c)]:.2f}" for m in self.models])
        return rows

    def header(self) -> list[str]:
        return ["Section Type", "Class"] + [MODEL_HEADERS.get(m, m) for m in self.models]

    def render_text(self) -> str:
        body = self.table_rows()
        for i, row in enumerate(body):
            if i % len(CLASS_ROWS):
                row[0] = ""
        rows = [self.header()] + body
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        rule = "  ".join("-" * w for w in widths)
        out = [rule]
        for i, r in enumerate(rows):
            out.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
            if i % len(CLASS_ROWS) == 0:
                out.append(rule)
        return "\n".join(out) + "\n"

    def render_csv(self) -> str:
        rows = [self.header()] + self.table_rows()
        return "\n".join(",".join(r) for r in rows) + "\n"


_SECTION_NAMES = {str(s) for s in SECTIONS}


def build_report(scores: Mapping[tuple[str, str], Mapping[str, float]], metadata: Optional[dict] = None,
                 models: Sequence[str] = MODELS) -> MetricsReport:
    """Assemble the (section, model) score table, refusing to leave any cell empty."""
    cells = {}
    for section in SECTIONS:
        for model in models:
            rows = scores.get((str(section), model))
            if rows is None:
                raise ReportError(f"no metrics for section {section}, model {model}")
            for c in CLASS_ROWS:
                if c not in rows:
                    raise ReportError(f"missing {c} row for section {section}, model {model}")
                cells[(str(section), model, c)] = float(rows[c])
    return MetricsReport(cells, dict(metadata or {}), tuple(str(s) for s in SECTIONS), tuple(models))


@dataclass
class _Task:
    section: SectionType
    fold: Fold
    base_seed: int
    repeats: int
    params: dict[Modality, ForestParams]
    fusion: bool
    scheme: str


def _run_task(task: _Task):
    results = run_repeats(task.fold, task.repeats, task.base_seed, task.params, task.fusion)
    return score_repeats(results, task.scheme)


def _section_tasks(instances: Sequence[Instance], config: RunConfig) -> tuple[list[_Task], dict]:
    params = {m: config.forest_params(m) for m in MODALITIES}
    tasks, info = [], {}
    for s_idx, section in enumerate(SECTIONS):
        subset = [inst for inst in instances if inst.section is section]
        if not subset:
            raise ReportError(f"no {section} windows to evaluate")
        if config.protocol == "loso":
            folds = loso_folds(subset)
        else:
            train, test = holdout_split_per_student(subset, config.holdout_fraction)
            if not test:
                raise ProtocolError(f"holdout split left no {section} test windows")
            folds = [Fold("holdout", train, test)]
        for f_idx, fold in enumerate(folds):
            tasks.append(_Task(section, fold, mix_seed(config.seed, s_idx, f_idx), config.repeats,
                               params, config.fusion, config.overall))
        info[str(section)] = {
            "instances": len(subset),
            "students": len({inst.student_id for inst in subset}),
            "folds": len(folds),
        }
    return tasks, info


def run_experiment(instances: Sequence[Instance], config: RunConfig, jobs: int = 1) -> MetricsReport:
    """Evaluate every model per section under the configured protocol."""
    tasks, info = _section_tasks(instances, config)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_task, tasks))
    else:
        outcomes = [_run_task(t) for t in tasks]

    models = MODELS if config.fusion else MODELS[:-1]
    per_student: dict[str, dict[str, dict]] = defaultdict(dict)
    for task, outcome in zip(tasks, outcomes):
        per_student[str(task.section)].update(outcome)

    scores = {}
    for section in SECTIONS:
        students = sorted(per_student[str(section)])
        for model in models:
            scores[(str(section), model)] = {
                c: sum(per_student[str(section)][s][model][c] for s in students) / len(students)
                for c in CLASS_ROWS
            }
    metadata = {
        "protocol": config.protocol,
        "seed": config.seed,
        "repeats": config.repeats,
        "overall": config.overall,
        "config_hash": config.config_hash(),
        "sections": info,
    }
    return build_report(scores, metadata, models)
