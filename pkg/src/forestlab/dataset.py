"""Dataset container, seeded RNG streams, splitting and bootstrap resampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Dataset:
    """Immutable numeric dataset.

    ``features`` is stored column-major (Fortran order) because split search
    scans one feature at a time.  ``truth`` optionally carries the noiseless
    target ``f(X)`` for synthetic data.
    """

    features: np.ndarray
    response: np.ndarray
    truth: Optional[np.ndarray] = None
    feature_names: tuple = field(default=())

    def __post_init__(self):
        X = np.asfortranarray(np.asarray(self.features, dtype=np.float64))
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        n, p = X.shape
        if n < 1 or p < 1:
            raise ValueError(f"dataset needs n >= 1 and p >= 1, got n={n}, p={p}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        y = np.asarray(self.response)
        if y.ndim != 1 or y.shape[0] != n:
            raise ValueError(f"response length {y.shape} does not match n={n}")
        if y.dtype.kind not in "iu":
            y = y.astype(np.float64)
        truth = self.truth
        if truth is not None:
            truth = np.asarray(truth, dtype=np.float64)
            if truth.shape != (n,):
                raise ValueError(f"truth length {truth.shape} does not match n={n}")
            truth.setflags(write=False)
        names = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise ValueError(f"{len(names)} feature names for {p} features")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        truth = None if self.truth is None else self.truth[rows]
        return Dataset(self.features[rows], self.response[rows], truth, self.feature_names)


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by ``(master_seed, stream_path)``.

    Streams are derived with :class:`numpy.random.SeedSequence` using the path
    as spawn key, so sibling streams are independent and the draws of one
    stream never depend on how many other streams exist or in which order
    they were consumed.
    """

    master_seed: int
    stream_path: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "stream_path", tuple(int(k) for k in self.stream_path))
        if self.master_seed < 0 or any(k < 0 for k in self.stream_path):
            raise ValueError("seeds and stream path entries must be non-negative")

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.master_seed, self.stream_path + tuple(keys))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_path)
        return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    test: np.ndarray


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def bootstrap_sample(data: Dataset | int, rng) -> np.ndarray:
    """Draw ``n`` row indices uniformly with replacement."""
    n = data if isinstance(data, (int, np.integer)) else data.n
    if n < 1:
        raise ValueError("cannot bootstrap an empty dataset")
    return _as_generator(rng).integers(0, n, size=n, dtype=np.int64)


def train_test_split(data: Dataset | int, train_fraction: float, rng) -> SplitIndices:
    """Uniform random partition with ``round(train_fraction * n)`` training rows."""
    n = data if isinstance(data, (int, np.integer)) else data.n
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if n < 2:
        raise ValueError("train/test split needs at least 2 rows")
    n_train = int(round(train_fraction * n))
    perm = _as_generator(rng).permutation(n)
    return SplitIndices(np.sort(perm[:n_train]), np.sort(perm[n_train:]))


def write_csv(data: Dataset, path: str | Path) -> None:
    header = list(data.feature_names) + ["y"]
    if data.truth is not None:
        header.append("f_true")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.features[i]]
            yi = data.response[i]
            row.append(str(int(yi)) if data.response.dtype.kind in "iu" else repr(float(yi)))
            if data.truth is not None:
                row.append(repr(float(data.truth[i])))
            writer.writerow(row)


def read_csv(path: str | Path, task: str = "regression") -> Dataset:
    """Read the dataset CSV format: feature columns, then ``y``, then optional ``f_true``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if "y" not in header:
        raise ValueError(f"{path}: missing 'y' column")
    y_col = header.index("y")
    feat_cols = [j for j, h in enumerate(header) if h not in ("y", "f_true")]
    if feat_cols != list(range(y_col)):
        raise ValueError(f"{path}: feature columns must precede 'y'")
    if not rows:
        raise ValueError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    y = table[:, y_col]
    if task == "classification":
        if not np.all(y == np.round(y)):
            raise ValueError(f"{path}: classification labels must be integers")
        y = y.astype(np.int64)
    truth = table[:, header.index("f_true")] if "f_true" in header else None
    return Dataset(table[:, feat_cols], y, truth, tuple(header[j] for j in feat_cols))


def feature_names(p: int) -> Sequence[str]:
    return tuple(f"x{j + 1}" for j in range(p))
