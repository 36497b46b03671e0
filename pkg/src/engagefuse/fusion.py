"""Decision-level fusion: one majority vote over the pooled trees of all modality forests.

``fuse_pooled`` lets every tree vote on its own modality's features.
``fuse_confidence_sum`` adds per-forest vote fractions instead; with equal
tree counts per forest the two always pick the same label.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from engagefuse.domain import LABELS, MODALITIES, EngagementLabel, Modality
from engagefuse.errors import ParameterError
from engagefuse.forest import FlatTree, Forest, TreeBatch, _as_row, forest_confidence

# summed confidences closer than this are a tie (true differences are multiples of 1/n_trees)
_SCORE_TOL = 1e-9


@dataclass
class FusionPool:
    """All trees of the input forests, in modality order then tree index."""

    entries: list[tuple[Modality, FlatTree]]
    arity: dict[Modality, int]
    _groups: Optional[list[tuple[Modality, TreeBatch]]] = field(default=None, init=False, repr=False,
                                                                compare=False)

    def __post_init__(self):
        if not self.entries:
            raise ParameterError("empty fusion pool")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return tuple(m for m in MODALITIES if m in self.arity)

    def _batches(self) -> list[tuple[Modality, TreeBatch]]:
        if self._groups is None:
            self._groups = [
                (m, TreeBatch([tree for mod, tree in self.entries if mod is m]))
                for m in self.modalities
            ]
        return self._groups

    def votes_batch(self, X: Mapping[Modality, np.ndarray]) -> np.ndarray:
        """(rows, 2) pooled vote counts; each tree reads its own modality's matrix."""
        total = None
        for modality, batch in self._batches():
            if modality not in X:
                raise ParameterError(f"missing {modality} features for fusion")
            Xm = np.atleast_2d(np.asarray(X[modality], dtype=float))
            if Xm.shape[1] != self.arity[modality]:
                raise ParameterError(
                    f"{modality} trees expect {self.arity[modality]} features, got {Xm.shape[1]}")
            v = batch.votes(Xm)
            total = v if total is None else total + v
        return total

    def predict_batch(self, X: Mapping[Modality, np.ndarray]) -> np.ndarray:
        v = self.votes_batch(X)
        return (v[:, 1] > v[:, 0]).astype(np.int64)


def pool_trees(forests: Mapping[Modality, Forest]) -> FusionPool:
    if not forests:
        raise ParameterError("pool_trees needs at least one forest")
    sizes = {forests[m].n_trees for m in MODALITIES if m in forests}
    if len(sizes) > 1:
        warnings.warn("forests have unequal tree counts; pooled voting then weights larger forests more",
                      stacklevel=2)
    entries = [(m, tree) for m in MODALITIES if m in forests for tree in forests[m].trees]
    arity = {m: forests[m].n_features for m in MODALITIES if m in forests}
    return FusionPool(entries, arity)


def fuse_pooled(pool: FusionPool, x: Mapping[Modality, object]) -> tuple[EngagementLabel, dict]:
    """Majority vote of every pooled tree; an exact tie goes to ON_TASK."""
    rows = {m: _as_row(x[m]) for m in pool.modalities if m in x}
    v = pool.votes_batch(rows)[0]
    votes = {label: int(v[int(label)]) for label in LABELS}
    label = EngagementLabel.OFF_TASK if votes[EngagementLabel.OFF_TASK] > votes[EngagementLabel.ON_TASK] \
        else EngagementLabel.ON_TASK
    return label, votes


def fuse_confidence_sum(forests: Mapping[Modality, Forest],
                        x: Mapping[Modality, object]) -> tuple[EngagementLabel, dict]:
    """Sum each forest's vote fractions per label and take the larger; ties go to ON_TASK."""
    if not forests:
        raise ParameterError("fuse_confidence_sum needs at least one forest")
    per_label: dict[EngagementLabel, list[float]] = {label: [] for label in LABELS}
    for modality in MODALITIES:
        if modality not in forests:
            continue
        if modality not in x:
            raise ParameterError(f"missing {modality} features for fusion")
        conf = forest_confidence(forests[modality], x[modality])
        for label in LABELS:
            per_label[label].append(conf[label])
    scores = {label: math.fsum(vals) for label, vals in per_label.items()}
    on, off = scores[EngagementLabel.ON_TASK], scores[EngagementLabel.OFF_TASK]
    label = EngagementLabel.OFF_TASK if off - on > _SCORE_TOL else EngagementLabel.ON_TASK
    return label, scores
