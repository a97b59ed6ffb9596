"""CART trees with per-split feature subsetting and a leaf-count budget."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _core
from .dataset import Dataset, RngStream

REGRESSION = "regression"
CLASSIFICATION = "classification"
TASKS = (REGRESSION, CLASSIFICATION)


@dataclass(frozen=True)
class TreeConfig:
    """Growth parameters for one tree.

    ``mtry`` is the fraction of features drawn at every split; the number of
    candidates is ``ceil(mtry * p)``.  ``max_leaf_nodes=None`` grows to full
    depth.  ``min_samples_split`` is the smallest node that may be split
    (R randomForest's ``nodesize`` corresponds to ``nodesize + 1``).
    """

    mtry: float = 1.0
    max_leaf_nodes: Optional[int] = None
    min_samples_leaf: int = 1
    task: str = REGRESSION
    min_samples_split: int = 2

    def __post_init__(self):
        if not (isinstance(self.mtry, (int, float)) and 0.0 < self.mtry <= 1.0):
            raise ValueError(f"mtry must lie in (0, 1], got {self.mtry!r}")
        if self.max_leaf_nodes is not None:
            if int(self.max_leaf_nodes) != self.max_leaf_nodes or self.max_leaf_nodes < 2:
                raise ValueError(f"max_leaf_nodes must be an integer >= 2, got {self.max_leaf_nodes!r}")
            object.__setattr__(self, "max_leaf_nodes", int(self.max_leaf_nodes))
        if int(self.min_samples_leaf) != self.min_samples_leaf or self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be a positive integer, got {self.min_samples_leaf!r}")
        if int(self.min_samples_split) != self.min_samples_split or self.min_samples_split < 2:
            raise ValueError(f"min_samples_split must be an integer >= 2, got {self.min_samples_split!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")

    def n_candidates(self, p: int) -> int:
        # guard against 0.33 * 3 = 0.9900000000000001 style float noise
        return min(p, max(1, math.ceil(round(self.mtry * p, 9))))


@dataclass(frozen=True)
class Tree:
    """Array-backed binary tree.

    Node ``i`` is internal iff ``feature[i] >= 0``.  For regression
    ``value`` holds leaf means; for classification it holds the index of the
    majority class into ``classes`` and ``counts`` the per-class row counts.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    depth: np.ndarray
    n_features: int
    task: str = REGRESSION
    impurity: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    classes: Optional[np.ndarray] = None
    stream_path: tuple = ()

    @property
    def node_count(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def apply(self, X) -> np.ndarray:
        X = _check_features(X, self.n_features)
        return _core.apply_tree(self.feature, self.threshold, self.left, self.right, X)

    def predict(self, X) -> np.ndarray:
        """Predict a batch of rows."""
        X = _check_features(X, self.n_features)
        raw = _core.predict_values(self.feature, self.threshold, self.left, self.right,
                                   self.value, X)
        if self.task == CLASSIFICATION:
            return self.classes[raw.astype(np.int64)]
        return raw

    def to_text(self) -> str:
        return dump_tree(self)


def _check_features(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"expected {p} features, got array of shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    return np.ascontiguousarray(X)


def _encode_labels(response: np.ndarray, classes: Optional[np.ndarray] = None):
    if classes is None:
        classes = np.unique(response)
    codes = np.searchsorted(classes, response)
    if np.any(codes >= len(classes)) or np.any(classes[np.minimum(codes, len(classes) - 1)] != response):
        raise ValueError("response contains labels outside the known classes")
    return codes.astype(np.float64), classes


def _prepare(data: Dataset, task: str, classes=None):
    Xt = np.ascontiguousarray(data.features.T)
    if task == CLASSIFICATION:
        y, classes = _encode_labels(np.asarray(data.response), classes)
        return Xt, y, len(classes), classes
    return Xt, np.asarray(data.response, dtype=np.float64), 0, None


def best_split(rows: Sequence[int], data: Dataset, candidate_features: Sequence[int],
               task: str = REGRESSION):
    """Exhaustive best split of ``rows`` over ``candidate_features``.

    Returns ``(feature, threshold, impurity_decrease)`` or ``None`` when no
    split produces two non-empty children or the rows are already pure.
    Ties go to the lowest feature index, then the lowest threshold.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) < 2:
        raise ValueError("best_split needs at least 2 rows")
    cands = np.unique(np.asarray(candidate_features, dtype=np.int64))
    if len(cands) == 0:
        raise ValueError("candidate_features must be non-empty")
    if cands[0] < 0 or cands[-1] >= data.p:
        raise ValueError(f"candidate features out of range for p={data.p}")
    Xt, y, n_classes, _ = _prepare(data, task)
    f, thr, dec = _core.best_split_on(Xt, y, rows, 0, len(rows), cands, 1, n_classes)
    if f < 0:
        return None
    return int(f), float(thr), float(dec)


def _fit_arrays(Xt, y, rows, config: TreeConfig, n_classes: int, rng: RngStream | None,
                classes=None) -> Tree:
    p, n_data = Xt.shape
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        raise ValueError("cannot fit a tree on zero rows")
    if rows.min() < 0 or rows.max() >= n_data:
        raise ValueError("row index out of range")
    k = config.n_candidates(p)
    if k < p:
        if rng is None:
            raise ValueError("an RngStream is required when mtry < 1")
        # at most 2 * len(rows) nodes are evaluated, each consuming <= p draws
        unif = rng.generator().random(2 * len(rows) * p)
    else:
        unif = np.zeros(1)
    max_leaves = -1 if config.max_leaf_nodes is None else config.max_leaf_nodes
    (feature, threshold, left, right, value, impurity, n_samples, depth,
     counts) = _core.grow_tree(Xt, y, rows, k, max_leaves, config.min_samples_leaf,
                               config.min_samples_split, n_classes, unif)
    return Tree(
        feature=feature, threshold=threshold, left=left, right=right, value=value,
        n_samples=n_samples, depth=depth, n_features=p, task=config.task,
        impurity=impurity,
        counts=counts if config.task == CLASSIFICATION else None,
        classes=classes,
        stream_path=() if rng is None else rng.stream_path,
    )


def fit_tree(data: Dataset, rows, config: TreeConfig, rng: RngStream | None = None,
             classes=None) -> Tree:
    """Grow a tree on the (possibly repeated) ``rows`` of ``data``.

    Unbounded trees grow depth-first until no node can be split; bounded
    trees expand the frontier leaf with the largest impurity decrease until
    ``max_leaf_nodes`` leaves exist.  Each split draws a fresh candidate
    feature subset from ``rng``.
    """
    Xt, y, n_classes, classes = _prepare(data, config.task, classes)
    return _fit_arrays(Xt, y, rows, config, n_classes, rng, classes)


def predict_tree(tree: Tree, x):
    """Predict a single p-vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_tree expects a single p-vector")
    return tree.predict(x.reshape(1, -1))[0]


def first_use_depth(tree: Tree, feature: int) -> Optional[int]:
    """Depth (root = 0) of the shallowest split on ``feature``, or None."""
    if not 0 <= feature < tree.n_features:
        raise ValueError(f"feature {feature} out of range for p={tree.n_features}")
    hits = tree.depth[tree.feature == feature]
    return int(hits.min()) if len(hits) else None


def first_use_depths(tree: Tree) -> np.ndarray:
    """Vector of first-use depths for every feature, NaN where unused."""
    out = np.full(tree.n_features, np.nan)
    internal = tree.feature >= 0
    for f, d in zip(tree.feature[internal], tree.depth[internal]):
        if not d >= out[f]:
            out[f] = d
    return out


# ---------------------------------------------------------------------------
# text serialization

def _fmt(v: float) -> str:
    return repr(float(v))


def dump_tree(tree: Tree, index: int = 0) -> str:
    """Line-oriented dump: a header line then one line per node.

    Node lines read ``id kind feature threshold value left right``; for
    classification leaves ``value`` is the comma-separated class counts.
    """
    classes = "" if tree.classes is None else ",".join(_fmt(c) if tree.classes.dtype.kind == "f"
                                                          else str(c) for c in tree.classes)
    path = ",".join(str(k) for k in tree.stream_path)
    lines = [f"tree {index} nodes={tree.node_count} n_features={tree.n_features} "
             f"task={tree.task} classes={classes} path={path}"]
    for i in range(tree.node_count):
        if tree.feature[i] >= 0:
            lines.append(f"{i} split {tree.feature[i]} {_fmt(tree.threshold[i])} "
                         f"{_fmt(tree.value[i])} {tree.left[i]} {tree.right[i]}")
        else:
            if tree.task == CLASSIFICATION:
                val = ",".join(str(int(c)) for c in tree.counts[i])
            else:
                val = _fmt(tree.value[i])
            lines.append(f"{i} leaf -1 nan {val} -1 -1")
    return "\n".join(lines) + "\n"


def load_tree(text: str) -> Tree:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    head = lines[0].split()
    if head[0] != "tree":
        raise ValueError(f"not a tree dump: {lines[0]!r}")
    meta = dict(tok.split("=", 1) for tok in head[2:])
    n_nodes = int(meta["nodes"])
    p = int(meta["n_features"])
    task = meta["task"]
    if len(lines) - 1 != n_nodes:
        raise ValueError(f"tree dump declares {n_nodes} nodes but has {len(lines) - 1}")
    classes = None
    if meta.get("classes"):
        raw = meta["classes"].split(",")
        try:
            classes = np.array([int(c) for c in raw])
        except ValueError:
            classes = np.array([float(c) for c in raw])
    feature = np.full(n_nodes, -1, dtype=np.int64)
    threshold = np.zeros(n_nodes)
    left = np.full(n_nodes, -1, dtype=np.int64)
    right = np.full(n_nodes, -1, dtype=np.int64)
    value = np.zeros(n_nodes)
    counts = np.zeros((n_nodes, len(classes))) if task == CLASSIFICATION else None
    for ln in lines[1:]:
        node_id, kind, f, thr, val, lo, hi = ln.split()
        i = int(node_id)
        if kind == "split":
            feature[i], threshold[i] = int(f), float(thr)
            left[i], right[i] = int(lo), int(hi)
            value[i] = float(val)
        elif kind == "leaf":
            if task == CLASSIFICATION:
                c = np.array([float(v) for v in val.split(",")])
                counts[i] = c
                value[i] = float(np.argmax(c))
            else:
                value[i] = float(val)
        else:
            raise ValueError(f"unknown node kind {kind!r}")
    depth = np.zeros(n_nodes, dtype=np.int64)
    n_samples = np.zeros(n_nodes, dtype=np.int64)
    for i in range(n_nodes):
        if feature[i] >= 0:
            depth[left[i]] = depth[right[i]] = depth[i] + 1
    if counts is not None:
        # internal-node counts are not stored; rebuild them bottom-up
        for i in range(n_nodes - 1, -1, -1):
            if feature[i] >= 0:
                counts[i] = counts[left[i]] + counts[right[i]]
        n_samples = counts.sum(axis=1).astype(np.int64)
    path = tuple(int(k) for k in meta.get("path", "").split(",") if k)
    return Tree(feature, threshold, left, right, value, n_samples, depth, p, task,
                counts=counts, classes=classes, stream_path=path)


# ---------------------------------------------------------------------------
# estimators

class _BaseCART(BaseEstimator):
    _task = REGRESSION

    def __init__(self, mtry=1.0, max_leaf_nodes=None, min_samples_leaf=1, min_samples_split=2,
                 random_state=0):
        self.mtry = mtry
        self.max_leaf_nodes = max_leaf_nodes
        self.min_samples_leaf = min_samples_leaf
        self.min_samples_split = min_samples_split
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=self._task == REGRESSION)
        config = TreeConfig(self.mtry, self.max_leaf_nodes, self.min_samples_leaf, self._task,
                            self.min_samples_split)
        if self._task == CLASSIFICATION:
            # trees work on integer codes; labels of any type map back through classes_
            self.classes_, y = np.unique(y, return_inverse=True)
        data = Dataset(X, y)
        self.tree_ = fit_tree(data, np.arange(len(y)), config, RngStream(self.random_state or 0))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=np.float64)
        out = self.tree_.predict(X)
        if self._task == CLASSIFICATION:
            return self.classes_[out.astype(np.int64)]
        return out

    def apply(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.apply(check_array(X, dtype=np.float64))


class CARTRegressor(RegressorMixin, _BaseCART):
    """Single regression tree (SSE impurity)."""

    _task = REGRESSION


class CARTClassifier(ClassifierMixin, _BaseCART):
    """Single classification tree (Gini impurity)."""

    _task = CLASSIFICATION
