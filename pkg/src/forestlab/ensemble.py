"""Bagged tree ensembles: bagging, SFS random forests and TRIM.

All three are the same procedure with different knobs:

* bagging: ``mtry=1.0``, unbounded leaves
* SFS random forest: ``mtry < 1.0``
* TRIM: ``mtry=1.0`` with ``max_leaf_nodes`` bounded
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import Dataset, RngStream, bootstrap_sample
from .tree import (CLASSIFICATION, REGRESSION, Tree, TreeConfig, _check_features, _fit_arrays,
                   _prepare, dump_tree, first_use_depths, load_tree)

FOREST_MAGIC = "#forestlab-forest v1"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    tree_config: TreeConfig = field(default_factory=TreeConfig)
    master_seed: int = 0

    def __post_init__(self):
        if int(self.n_trees) != self.n_trees or self.n_trees < 1:
            raise ValueError(f"n_trees must be a positive integer, got {self.n_trees!r}")
        object.__setattr__(self, "n_trees", int(self.n_trees))

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "master_seed": self.master_seed,
                **asdict(self.tree_config)}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestConfig":
        tc = TreeConfig(d["mtry"], d["max_leaf_nodes"], d["min_samples_leaf"], d["task"],
                        d.get("min_samples_split", 2))
        return cls(d["n_trees"], tc, d["master_seed"])


@dataclass(frozen=True)
class Forest:
    trees: List[Tree]
    config: ForestConfig
    classes: Optional[np.ndarray] = None

    @property
    def task(self) -> str:
        return self.config.tree_config.task

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features

    def tree_predictions(self, X) -> np.ndarray:
        """(n_trees, n_rows) matrix of raw per-tree outputs.

        For classification the entries are class indices into ``classes``.
        """
        from . import _core

        X = _check_features(X, self.n_features)
        out = np.empty((len(self.trees), X.shape[0]))
        for k, t in enumerate(self.trees):
            out[k] = _core.predict_values(t.feature, t.threshold, t.left, t.right, t.value, X)
        return out

    def predict(self, X) -> np.ndarray:
        raw = self.tree_predictions(X)
        if self.task == REGRESSION:
            return raw.mean(axis=0)
        votes = np.zeros((len(self.classes), raw.shape[1]), dtype=np.int64)
        codes = raw.astype(np.int64)
        for c in range(len(self.classes)):
            votes[c] = (codes == c).sum(axis=0)
        # argmax returns the first maximum, i.e. the lowest class label
        return self.classes[np.argmax(votes, axis=0)]


def _fit_one(args):
    Xt, y, n_classes, classes, n, cfg, stream = args
    rows = bootstrap_sample(n, stream.child(0))
    return _fit_arrays(Xt, y, rows, cfg, n_classes, stream.child(1), classes)


def fit_forest(data: Dataset, config: ForestConfig, n_jobs: int = 1) -> Forest:
    """Fit ``config.n_trees`` trees, each on its own bootstrap bag.

    Tree ``k`` draws its bag and its split-feature subsets from child stream
    ``k`` of the master seed, so the result does not depend on ``n_jobs``.
    """
    tc = config.tree_config
    Xt, y, n_classes, classes = _prepare(data, tc.task)
    root = RngStream(config.master_seed)
    jobs = [(Xt, y, n_classes, classes, data.n, tc, root.child(k)) for k in range(config.n_trees)]
    if n_jobs is None or n_jobs == 1:
        trees = [_fit_one(j) for j in jobs]
    else:
        # the compiled kernels release the GIL
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(_fit_one, jobs))
    return Forest(trees, config, classes)


def predict_forest(forest: Forest, x):
    """Prediction for a single p-vector: mean (regression) or plurality vote."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_forest expects a single p-vector")
    return forest.predict(x.reshape(1, -1))[0]


def average_first_depth(forest: Forest, feature: int):
    """(mean first-use depth over trees using ``feature``, usage fraction).

    The mean is NaN when no tree splits on the feature.
    """
    if not 0 <= feature < forest.n_features:
        raise ValueError(f"feature {feature} out of range for p={forest.n_features}")
    depths = np.array([first_use_depths(t)[feature] for t in forest.trees])
    used = ~np.isnan(depths)
    usage = float(used.mean())
    mean = float(depths[used].mean()) if used.any() else float("nan")
    return mean, usage


def feature_depth_table(forest: Forest):
    """Per-feature ``(mean_first_depth, usage_fraction)`` arrays."""
    depths = np.array([first_use_depths(t) for t in forest.trees])
    used = ~np.isnan(depths)
    usage = used.mean(axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(used.any(axis=0), np.nansum(depths, axis=0) / used.sum(axis=0), np.nan)
    return mean, usage


def pairwise_tree_correlation(forest: Forest, data: Dataset | np.ndarray) -> float:
    """Mean pairwise correlation between per-tree prediction vectors.

    A tree whose predictions are constant over the points contributes
    correlation 0 to each of its pairs.
    """
    if forest.task != REGRESSION:
        raise ValueError("pairwise_tree_correlation needs a regression forest")
    if len(forest.trees) < 2:
        raise ValueError("need at least 2 trees")
    X = data.features if isinstance(data, Dataset) else data
    preds = forest.tree_predictions(X)
    return _mean_pairwise_corr(preds)


def _mean_pairwise_corr(preds: np.ndarray) -> float:
    if preds.shape[1] < 2:
        raise ValueError("need at least 2 evaluation points")
    centered = preds - preds.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered ** 2).sum(axis=1))
    z = np.divide(centered, norms[:, None], out=np.zeros_like(centered), where=norms[:, None] > 0)
    corr = z @ z.T
    iu = np.triu_indices(len(preds), k=1)
    return float(np.clip(corr[iu], -1.0, 1.0).mean())


# ---------------------------------------------------------------------------
# serialization

def dump_forest(forest: Forest) -> str:
    header = forest.config.to_dict()
    if forest.classes is not None:
        header["classes"] = [c.item() for c in forest.classes]
    parts = [f"{FOREST_MAGIC} {json.dumps(header, sort_keys=True)}\n"]
    parts += [dump_tree(t, k) for k, t in enumerate(forest.trees)]
    return "".join(parts)


def load_forest(text: str) -> Forest:
    first, _, rest = text.partition("\n")
    if not first.startswith(FOREST_MAGIC):
        raise ValueError("not a forest file")
    header = json.loads(first[len(FOREST_MAGIC):])
    config = ForestConfig.from_dict(header)
    blocks, current = [], []
    for line in rest.splitlines():
        if line.startswith("tree ") and current:
            blocks.append("\n".join(current))
            current = []
        if line.strip():
            current.append(line)
    if current:
        blocks.append("\n".join(current))
    trees = [load_tree(b) for b in blocks]
    if len(trees) != config.n_trees:
        raise ValueError(f"forest header declares {config.n_trees} trees, found {len(trees)}")
    classes = np.array(header["classes"]) if "classes" in header else None
    return Forest(trees, config, classes)


def save_forest(forest: Forest, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_forest(forest))


def read_forest(path) -> Forest:
    with open(path) as fh:
        return load_forest(fh.read())


# ---------------------------------------------------------------------------
# estimators

class _BaseForest(BaseEstimator):
    _task = REGRESSION

    def __init__(self, n_trees=100, mtry=1.0, max_leaf_nodes=None, min_samples_leaf=1,
                 min_samples_split=2, random_state=0, n_jobs=1):
        self.n_trees = n_trees
        self.mtry = mtry
        self.max_leaf_nodes = max_leaf_nodes
        self.min_samples_leaf = min_samples_leaf
        self.min_samples_split = min_samples_split
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> ForestConfig:
        tc = TreeConfig(self.mtry, self.max_leaf_nodes, self.min_samples_leaf, self._task,
                        self.min_samples_split)
        return ForestConfig(self.n_trees, tc, 0 if self.random_state is None else self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=self._task == REGRESSION)
        if self._task == CLASSIFICATION:
            self.classes_, y = np.unique(y, return_inverse=True)
        self.forest_ = fit_forest(Dataset(X, y), self._config(), n_jobs=self.n_jobs)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        out = self.forest_.predict(check_array(X, dtype=np.float64))
        if self._task == CLASSIFICATION:
            return self.classes_[out.astype(np.int64)]
        return out

    @property
    def estimators_(self):
        check_is_fitted(self, "forest_")
        return self.forest_.trees

    def feature_depths(self):
        """Average first-use depth and usage fraction per feature."""
        check_is_fitted(self, "forest_")
        return feature_depth_table(self.forest_)


class ForestRegressor(RegressorMixin, _BaseForest):
    """Bagged regression trees; ``mtry < 1`` gives an SFS random forest."""

    _task = REGRESSION


class ForestClassifier(ClassifierMixin, _BaseForest):
    """Bagged classification trees combined by hard plurality vote."""

    _task = CLASSIFICATION

    def predict_proba(self, X):
        check_is_fitted(self, "forest_")
        raw = self.forest_.tree_predictions(check_array(X, dtype=np.float64)).astype(np.int64)
        return np.stack([(raw == c).mean(axis=0) for c in range(len(self.classes_))], axis=1)

