"""Synthetic data-generating processes with SNR-calibrated Gaussian noise."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Dataset, RngStream, write_csv

MARS = "MARS"
MARSADD = "MARSADD"
HMARS = "HMARS"
HMARSADD = "HMARSADD"
HIDDEN2D = "HIDDEN2D"
BAND2D_CLASS = "BAND2D_CLASS"
SPHERE3D_CLASS = "SPHERE3D_CLASS"

BASE_P = {MARS: 5, MARSADD: 5, HMARS: 7, HMARSADD: 7, HIDDEN2D: 2,
          BAND2D_CLASS: 2, SPHERE3D_CLASS: 3}
REGRESSION_DGPS = (MARS, MARSADD, HMARS, HMARSADD, HIDDEN2D)
CLASSIFICATION_DGPS = (BAND2D_CLASS, SPHERE3D_CLASS)

# feature indices (0-based) carrying a narrow indicator band
HIDDEN_FEATURES = {HMARS: (5, 6), HMARSADD: (5, 6), HIDDEN2D: (1,), BAND2D_CLASS: (1,)}

CALIBRATION_DRAWS = 1_000_000
_CALIBRATION_SEED = 20231016

SPHERE_CENTER = 0.5
SPHERE_RADIUS = 1.0
SPHERE_LOW, SPHERE_HIGH = -0.5, 1.5


def normalize_name(name: str) -> str:
    key = str(name).upper()
    if key not in BASE_P:
        raise ValueError(f"unknown DGP {name!r}; choose from {sorted(BASE_P)}")
    return key


def is_classification(name: str) -> bool:
    return normalize_name(name) in CLASSIFICATION_DGPS


def _band(x, lo, hi):
    return ((x >= lo) & (x <= hi)).astype(np.float64)


def _mars(X):
    return (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.05) ** 2
            + 10 * X[:, 3] + 5 * X[:, 4])


def _marsadd(X):
    return (0.1 * np.exp(4 * X[:, 0]) + 4 / (1 + np.exp(-20 * (X[:, 1] - 0.5)))
            + 3 * X[:, 2] + 2 * X[:, 3] + X[:, 4])


def eval_truth(name: str, x) -> np.ndarray | float:
    """Noiseless target of a DGP.

    Regression DGPs return ``f(x)``; classification DGPs return
    ``P(Y = 1 | x)``.  Columns past the DGP's base dimension are ignored.
    Accepts a single p-vector or an (n, p) matrix.
    """
    key = normalize_name(name)
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] < BASE_P[key]:
        raise ValueError(f"{key} needs at least {BASE_P[key]} features, got {X.shape[1]}")
    if key == MARS:
        out = _mars(X)
    elif key == MARSADD:
        out = _marsadd(X)
    elif key == HMARS:
        out = _mars(X) - 30 * _band(X[:, 5], 0.6, 0.65) - 35 * _band(X[:, 6], 0.55, 0.6)
    elif key == HMARSADD:
        out = _marsadd(X) - 10 * _band(X[:, 5], 0.6, 0.65) - 7.5 * _band(X[:, 6], 0.55, 0.6)
    elif key == HIDDEN2D:
        out = X[:, 0] - _band(X[:, 1], 0.6, 0.65)
    elif key == BAND2D_CLASS:
        # the band rule takes precedence over P = x1
        out = np.where(_band(X[:, 1], 0.6, 0.65) > 0, 0.9, X[:, 0])
    else:
        dist2 = ((X[:, :3] - SPHERE_CENTER) ** 2).sum(axis=1)
        out = np.where(dist2 <= SPHERE_RADIUS ** 2, 0.9, 0.1)
    return float(out[0]) if single else out


def _sample_features(key: str, n: int, p: int, gen: np.random.Generator) -> np.ndarray:
    X = gen.random((n, p))
    if key == SPHERE3D_CLASS:
        # a unit sphere around (0.5, 0.5, 0.5) covers the whole unit cube
        X[:, :3] = SPHERE_LOW + (SPHERE_HIGH - SPHERE_LOW) * X[:, :3]
    return X


@lru_cache(maxsize=None)
def truth_variance(name: str, draws: int = CALIBRATION_DRAWS) -> float:
    """Monte-Carlo ``Var(f(X))`` under the DGP's feature distribution.

    Uses a fixed calibration seed so every trial of a sweep sees the same
    noise level.
    """
    key = normalize_name(name)
    if key in CLASSIFICATION_DGPS:
        raise ValueError(f"{key} is a classification DGP; SNR calibration does not apply")
    gen = RngStream(_CALIBRATION_SEED, (0,)).generator()
    total = 0
    mean = 0.0
    m2 = 0.0
    # chunked Welford-style merge keeps memory flat
    for start in range(0, draws, 250_000):
        m = min(250_000, draws - start)
        f = eval_truth(key, _sample_features(key, m, BASE_P[key], gen))
        c_mean = f.mean()
        c_m2 = ((f - c_mean) ** 2).sum()
        delta = c_mean - mean
        new_total = total + m
        mean += delta * m / new_total
        m2 += c_m2 + delta * delta * total * m / new_total
        total = new_total
    return float(m2 / (total - 1))


def calibrate_sigma2(name: str, snr: float, extra_noise_features: int = 0,
                     draws: int = CALIBRATION_DRAWS) -> float:
    """Noise variance giving ``Var(f(X)) / sigma2 == snr``."""
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr!r}")
    if extra_noise_features < 0:
        raise ValueError("extra_noise_features must be non-negative")
    # appended features do not enter f, so they leave Var(f(X)) unchanged
    return truth_variance(normalize_name(name), draws) / snr


@dataclass(frozen=True)
class DgpSpec:
    name: str
    n: int
    snr: Optional[float] = None
    extra_noise_features: int = 0
    seed: int = 0

    def __post_init__(self):
        key = normalize_name(self.name)
        object.__setattr__(self, "name", key)
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if int(self.extra_noise_features) != self.extra_noise_features or self.extra_noise_features < 0:
            raise ValueError(f"extra_noise_features must be a non-negative integer, "
                             f"got {self.extra_noise_features!r}")
        if key in REGRESSION_DGPS and not (self.snr is not None and self.snr > 0):
            raise ValueError(f"snr must be positive for {key}, got {self.snr!r}")

    @property
    def p(self) -> int:
        return BASE_P[self.name] + self.extra_noise_features

    @property
    def task(self) -> str:
        return "classification" if self.name in CLASSIFICATION_DGPS else "regression"


@dataclass(frozen=True)
class GeneratedData:
    dataset: Dataset
    sigma2: Optional[float]
    meta: DgpSpec
    truth_variance: Optional[float] = None


def generate(spec: DgpSpec, rng: RngStream | None = None) -> GeneratedData:
    """Draw ``spec.n`` rows: U(0,1) features, exact truth, then noise or labels.

    ``rng`` defaults to the stream rooted at ``spec.seed``.
    """
    stream = rng if rng is not None else RngStream(spec.seed)
    gen = stream.generator()
    X = _sample_features(spec.name, spec.n, spec.p, gen)
    truth = eval_truth(spec.name, X)
    if spec.task == "classification":
        y = (gen.random(spec.n) < truth).astype(np.int64)
        return GeneratedData(Dataset(X, y, truth), None, spec)
    var_f = truth_variance(spec.name)
    sigma2 = var_f / spec.snr
    y = truth + gen.normal(0.0, np.sqrt(sigma2), spec.n)
    return GeneratedData(Dataset(X, y, truth), sigma2, spec, var_f)


def noiseless_points(name: str, n: int, extra_noise_features: int, rng: RngStream) -> Dataset:
    """Feature draws with ``response = truth`` (for fixed evaluation sets)."""
    key = normalize_name(name)
    X = _sample_features(key, n, BASE_P[key] + extra_noise_features, rng.generator())
    f = eval_truth(key, X)
    return Dataset(X, f, f)


def write_generated(gen: GeneratedData, path: str | Path) -> Path:
    """Write the dataset CSV plus a JSON sidecar next to it; returns the sidecar path."""
    path = Path(path)
    write_csv(gen.dataset, path)
    sidecar = path.with_suffix(".json")
    meta = {"spec": asdict(gen.meta), "sigma2": gen.sigma2,
            "truth_variance": gen.truth_variance, "seed": gen.meta.seed,
            "calibration_draws": CALIBRATION_DRAWS if gen.sigma2 is not None else None}
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return sidecar
