"""CART trees with Gini splits and bagged random forests, written from scratch.

Conventions shared by every tree in the package:

* a row goes LEFT when ``x[feature] <= threshold``;
* thresholds are midpoints between consecutive distinct sorted values;
* equal-gain splits prefer the lower feature index, then the lower threshold;
* a leaf predicts the argmax of its class counts, ties going to ``ON_TASK``.

Per-tree seeds come from :func:`mix_seed`, so trees can be trained in any
order (or in parallel) and still assemble into the same forest.

Trees are stored as :class:`FlatTree` (preorder node arrays); the nested
:class:`Leaf` / :class:`Internal` form is available through ``FlatTree.root``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from engagefuse.domain import LABELS, EngagementLabel, Modality
from engagefuse.errors import ParameterError

try:
    from engagefuse import _kernels
except ImportError:  # numba missing: fall back to the numpy grower
    _kernels = None

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
# gains closer than this are treated as equal when breaking ties
_GAIN_TOL = 1e-12


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(seed: int, *keys: int) -> int:
    """Derive a 64-bit sub-seed from ``seed`` and a path of integer keys.

    Each key is folded in with one SplitMix64 step:
    ``x = splitmix64(x ^ splitmix64(key))``, starting from ``x = seed mod 2**64``.
    """
    x = int(seed) & _MASK64
    for k in keys:
        x = _splitmix64(x ^ _splitmix64(int(k) & _MASK64))
    return x


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float


@dataclass(frozen=True)
class Leaf:
    on_count: int
    off_count: int

    def __post_init__(self):
        if self.on_count < 0 or self.off_count < 0 or self.on_count + self.off_count == 0:
            raise ParameterError(f"invalid leaf counts ({self.on_count}, {self.off_count})")

    @property
    def class_counts(self) -> dict[EngagementLabel, int]:
        return {EngagementLabel.ON_TASK: self.on_count, EngagementLabel.OFF_TASK: self.off_count}

    @property
    def prediction(self) -> EngagementLabel:
        return EngagementLabel.OFF_TASK if self.off_count > self.on_count else EngagementLabel.ON_TASK


@dataclass(frozen=True)
class Internal:
    split: Split
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Internal]


class FlatTree:
    """One tree as preorder node arrays. Leaves have ``feature == -1``."""

    __slots__ = ("feature", "threshold", "left", "right", "on_count", "off_count", "depth")

    def __init__(self, feature, threshold, left, right, on_count, off_count, depth: int):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.on_count = np.asarray(on_count, dtype=np.int64)
        self.off_count = np.asarray(off_count, dtype=np.int64)
        self.depth = int(depth)

    def __len__(self) -> int:
        return self.feature.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlatTree):
            return NotImplemented
        return self.depth == other.depth and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("feature", "threshold", "left", "right", "on_count", "off_count"))

    def __repr__(self) -> str:
        return f"FlatTree(nodes={len(self)}, depth={self.depth})"

    @property
    def root(self) -> TreeNode:
        return self.node(0)

    def node(self, i: int) -> TreeNode:
        if self.feature[i] < 0:
            return Leaf(int(self.on_count[i]), int(self.off_count[i]))
        return Internal(Split(int(self.feature[i]), float(self.threshold[i])),
                        self.node(int(self.left[i])), self.node(int(self.right[i])))

    @classmethod
    def from_node(cls, root: TreeNode) -> "FlatTree":
        cols: dict[str, list] = {k: [] for k in ("feature", "threshold", "left", "right", "on", "off")}
        depth = 0

        def visit(node: TreeNode, d: int) -> tuple[int, int, int]:
            nonlocal depth
            depth = max(depth, d)
            i = len(cols["feature"])
            for k in cols:
                cols[k].append(-1 if k in ("feature", "left", "right") else 0)
            if isinstance(node, Leaf):
                cols["on"][i], cols["off"][i] = node.on_count, node.off_count
                return i, node.on_count, node.off_count
            cols["feature"][i] = node.split.feature_index
            cols["threshold"][i] = node.split.threshold
            li, lon, loff = visit(node.left, d + 1)
            cols["left"][i] = li
            ri, ron, roff = visit(node.right, d + 1)
            cols["right"][i] = ri
            cols["on"][i], cols["off"][i] = lon + ron, loff + roff
            return i, lon + ron, loff + roff

        visit(root, 0)
        return cls(cols["feature"], cols["threshold"], cols["left"], cols["right"], cols["on"], cols["off"],
                   depth)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def predict(self, x: Sequence[float]) -> EngagementLabel:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return EngagementLabel.OFF_TASK if self.off_count[i] > self.on_count[i] else EngagementLabel.ON_TASK


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = 12
    min_samples_leaf: int = 2
    mtry: Optional[int] = None
    # off only for the single-tree reference check against plain CART
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise ParameterError("n_trees and min_samples_leaf must be positive")
        if self.max_depth is not None and self.max_depth < 1:
            raise ParameterError("max_depth must be positive or None")
        if self.mtry is not None and self.mtry < 1:
            raise ParameterError("mtry must be positive or None")

    def resolve_mtry(self, n_features: int) -> int:
        if n_features < 1:
            raise ParameterError("need at least one feature")
        mtry = self.mtry if self.mtry is not None else max(1, round(math.sqrt(n_features)))
        if mtry > n_features:
            raise ParameterError(f"mtry {mtry} exceeds feature count {n_features}")
        return mtry

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_samples_leaf": self.min_samples_leaf,
            "mtry": self.mtry,
            "bootstrap": self.bootstrap,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ForestParams":
        extra = set(data) - set(cls().to_dict())
        if extra:
            raise ParameterError(f"unknown forest parameters {sorted(extra)}")
        for key in ("n_trees", "max_depth", "min_samples_leaf", "mtry"):
            value = data.get(key)
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise ParameterError(f"forest parameter {key} must be an integer")
        return cls(**data)


def gini(counts: Union[Mapping[EngagementLabel, int], Sequence[int]]) -> float:
    values = list(counts.values()) if isinstance(counts, Mapping) else list(counts)
    if any(c < 0 for c in values):
        raise ParameterError("negative class count")
    total = sum(values)
    if total == 0:
        raise ParameterError("gini of an empty node")
    return 1.0 - sum((c / total) ** 2 for c in values)


def _labels(y) -> np.ndarray:
    if isinstance(y, np.ndarray):
        return y.astype(np.int64)
    return np.asarray([int(v) for v in y], dtype=np.int64)


def _split_search(cols: np.ndarray, y: np.ndarray, min_samples_leaf: int):
    """Scan all midpoints of every column of ``cols``; returns (column, threshold, gain) or None."""
    n, m = cols.shape
    order = cols.argsort(axis=0, kind="stable")
    sv = cols[order, np.arange(m)]
    off_left = y[order].cumsum(axis=0)[:-1]
    n_left = np.arange(1.0, n)[:, None]
    n_right = n - n_left
    total_off = y.sum()
    on_left = n_left - off_left
    off_right = total_off - off_left
    on_right = n_right - off_right
    # n * (1 - weighted child gini) = sum over children of squared class counts / child size
    score = (on_left * on_left + off_left * off_left) / n_left \
        + (on_right * on_right + off_right * off_right) / n_right
    valid = sv[1:] > sv[:-1]
    if min_samples_leaf > 1:
        valid[: min_samples_leaf - 1] = False
        valid[n - min_samples_leaf:] = False
    score[~valid] = -np.inf
    on_total = n - total_off
    parent_ss = (on_total * on_total + total_off * total_off) / n
    top = score.max()
    if not (top - parent_ss) / n > _GAIN_TOL:
        return None
    hits = score >= top - _GAIN_TOL * n
    j = int(hits.any(axis=0).argmax())
    i = int(hits[:, j].argmax())
    lo, hi = sv[i, j], sv[i + 1, j]
    threshold = (lo + hi) / 2.0
    if not threshold < hi:
        # adjacent floats: the midpoint rounded up onto hi
        threshold = lo
    return j, float(threshold), float((score[i, j] - parent_ss) / n)


def best_split(X, y, candidate_features: Sequence[int],
               min_samples_leaf: int = 1) -> Optional[tuple[Split, float]]:
    """Best Gini split over the candidate features, or None if nothing strictly reduces impurity.

    ``min_samples_leaf`` restricts thresholds to those leaving that many rows per side.
    """
    X = np.asarray(X, dtype=float)
    y = _labels(y)
    if y.shape[0] < 2 or len(candidate_features) == 0:
        return None
    feats = np.array(sorted(candidate_features), dtype=np.int64)
    found = _split_search(X[:, feats], y.astype(float), min_samples_leaf)
    if found is None:
        return None
    j, threshold, gain = found
    return Split(int(feats[j]), threshold), gain


def _draw_features(uniforms: np.ndarray, pos: int, n_features: int, mtry: int) -> np.ndarray:
    """Partial Fisher-Yates over ``range(n_features)`` consuming ``mtry`` uniforms; sorted."""
    perm = list(range(n_features))
    for i in range(mtry):
        j = i + int(uniforms[pos + i] * (n_features - i))
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(sorted(perm[:mtry]), dtype=np.int64)


def _grow_reference(X: np.ndarray, y: np.ndarray, rows: np.ndarray, depth: int, params: ForestParams,
                    mtry: int, uniforms: np.ndarray, pos: list[int]) -> TreeNode:
    """Plain recursive grower on top of ``_split_search``; the compiled kernel must match it."""
    yr = y[rows]
    off = int(yr.sum())
    on = rows.size - off
    leaf = Leaf(on, off)
    if on == 0 or off == 0:
        return leaf
    if params.max_depth is not None and depth >= params.max_depth:
        return leaf
    if rows.size < 2 * params.min_samples_leaf:
        return leaf
    feats = _draw_features(uniforms, pos[0], X.shape[1], mtry)
    pos[0] += mtry
    found = _split_search(X[np.ix_(rows, feats)], yr, params.min_samples_leaf)
    if found is None:
        return leaf
    j, threshold, _ = found
    split = Split(int(feats[j]), threshold)
    go_left = X[rows, split.feature_index] <= threshold
    left = _grow_reference(X, y, rows[go_left], depth + 1, params, mtry, uniforms, pos)
    right = _grow_reference(X, y, rows[~go_left], depth + 1, params, mtry, uniforms, pos)
    return Internal(split, left, right)


def train_tree(X, y, params: ForestParams, rng_seed: int, engine: str = "compiled") -> FlatTree:
    """Grow one tree; ``mtry`` features are drawn without replacement at every node.

    Feature draws come from a uniform stream of ``default_rng(rng_seed)``
    consumed in preorder (left subtree first). ``engine="reference"`` runs the
    pure numpy grower; both engines return identical trees.
    """
    X = np.asarray(X, dtype=float)
    y = _labels(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("train_tree needs a non-empty 2-D feature matrix")
    if y.shape[0] != X.shape[0]:
        raise ParameterError("feature and label row counts differ")
    mtry = params.resolve_mtry(X.shape[1])
    n = X.shape[0]
    # at most 2n - 1 nodes, each consuming at most mtry uniforms
    uniforms = np.random.default_rng(rng_seed).random(2 * n * mtry)
    yf = y.astype(float)
    if engine == "reference" or _kernels is None:
        return FlatTree.from_node(_grow_reference(X, yf, np.arange(n), 0, params, mtry, uniforms, [0]))
    if engine != "compiled":
        raise ParameterError(f"unknown engine {engine!r}")
    max_depth = -1 if params.max_depth is None else params.max_depth
    feature, threshold, left, right, on, off, _, depth = _kernels.grow_tree(
        np.ascontiguousarray(X), yf, max_depth, params.min_samples_leaf, mtry, uniforms)
    return FlatTree(feature, threshold, left, right, on, off, depth)


def iter_nodes(node: TreeNode) -> Iterator[TreeNode]:
    stack = [node]
    while stack:
        cur = stack.pop()
        yield cur
        if isinstance(cur, Internal):
            stack.extend((cur.right, cur.left))


class TreeBatch:
    """Several trees concatenated so a whole matrix of rows is routed through all at once."""

    def __init__(self, trees: Sequence[FlatTree]):
        sizes = np.array([len(t) for t in trees], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.n_trees = len(trees)
        self.depth = max((t.depth for t in trees), default=0)
        self.roots = offsets
        feature = np.concatenate([t.feature for t in trees])
        is_leaf = feature < 0
        own = np.arange(feature.shape[0])
        shift = np.repeat(offsets, sizes)
        self.feature = np.where(is_leaf, 0, feature)
        self.threshold = np.concatenate([t.threshold for t in trees])
        # leaves point at themselves so extra routing steps are no-ops
        self.left = np.where(is_leaf, own, np.concatenate([t.left for t in trees]) + shift)
        self.right = np.where(is_leaf, own, np.concatenate([t.right for t in trees]) + shift)
        on = np.concatenate([t.on_count for t in trees])
        off = np.concatenate([t.off_count for t in trees])
        self.pred = (off > on).astype(np.int64)

    def predictions(self, X: np.ndarray) -> np.ndarray:
        """(rows, trees) matrix of per-tree class indices."""
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        node = np.broadcast_to(self.roots, (n, self.n_trees)).copy()
        rows = np.arange(n)[:, None]
        for _ in range(self.depth):
            go_left = X[rows, self.feature[node]] <= self.threshold[node]
            node = np.where(go_left, self.left[node], self.right[node])
        return self.pred[node]

    def votes(self, X: np.ndarray) -> np.ndarray:
        """(rows, 2) vote counts in label order."""
        off = self.predictions(X).sum(axis=1)
        return np.stack([self.n_trees - off, off], axis=1)


@dataclass
class Forest:
    modality: Modality
    trees: list[FlatTree]
    feature_names: tuple[str, ...]
    params: ForestParams
    seed: int
    _batch: Optional[TreeBatch] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.trees:
            raise ParameterError("a forest needs at least one tree")
        self.trees = [t if isinstance(t, FlatTree) else FlatTree.from_node(t) for t in self.trees]
        self.feature_names = tuple(self.feature_names)
        for t in self.trees:
            if t.feature.max(initial=-1) >= len(self.feature_names):
                raise ParameterError("tree references a feature outside the forest's feature set")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def batch(self) -> TreeBatch:
        if self._batch is None:
            self._batch = TreeBatch(self.trees)
        return self._batch

    def check_arity(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ParameterError(
                f"{self.modality} forest expects {self.n_features} features, got {X.shape[1]}")
        return X

    def votes_batch(self, X) -> np.ndarray:
        return self.batch.votes(self.check_arity(X))

    def predict_batch(self, X) -> np.ndarray:
        v = self.votes_batch(X)
        return (v[:, 1] > v[:, 0]).astype(np.int64)


def train_forest(X, y, params: ForestParams, seed: int, modality: Modality = Modality.APPEARANCE,
                 feature_names: Optional[Sequence[str]] = None, engine: str = "compiled") -> Forest:
    """Bagged forest: tree ``i`` uses sub-seed ``mix_seed(seed, i)``.

    The sub-seed's generator draws the bootstrap rows (n with replacement),
    then the tree is grown with ``mix_seed(sub_seed, 1)``.
    """
    X = np.asarray(X, dtype=float)
    y = _labels(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("train_forest needs a non-empty 2-D feature matrix")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ParameterError("feature_names length does not match the feature matrix")
    n = X.shape[0]
    trees = []
    for i in range(params.n_trees):
        sub = mix_seed(seed, i)
        if params.bootstrap:
            rows = np.random.default_rng(sub).integers(0, n, size=n)
            Xi, yi = X[rows], y[rows]
        else:
            Xi, yi = X, y
        trees.append(train_tree(Xi, yi, params, mix_seed(sub, 1), engine))
    return Forest(modality, trees, names, params, int(seed) & _MASK64)


def _as_row(x) -> np.ndarray:
    values = getattr(x, "values", x) if not isinstance(x, np.ndarray) else x
    return np.asarray(values, dtype=float).reshape(1, -1)


def forest_votes(forest: Forest, x) -> dict[EngagementLabel, int]:
    """Tree-vote counts for one feature vector (or plain sequence of values)."""
    v = forest.votes_batch(_as_row(x))[0]
    return {label: int(v[int(label)]) for label in LABELS}


def forest_confidence(forest: Forest, x) -> dict[EngagementLabel, float]:
    votes = forest_votes(forest, x)
    return {label: votes[label] / forest.n_trees for label in LABELS}


def majority_label(votes: Mapping[EngagementLabel, float]) -> EngagementLabel:
    if votes[EngagementLabel.OFF_TASK] > votes[EngagementLabel.ON_TASK]:
        return EngagementLabel.OFF_TASK
    return EngagementLabel.ON_TASK
