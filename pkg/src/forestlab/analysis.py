"""Error metrics, effective degrees of freedom and bias-variance decomposition."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .dataset import Dataset, RngStream
from .ensemble import ForestConfig, fit_forest
from .tree import TreeConfig

log = logging.getLogger(__name__)

DEFAULT_MAXNODES_GRID = (2, 5, 10, 20, 35, 50, 75, 100, 140, 200)


@dataclass(frozen=True)
class DofEstimate:
    dof: float
    replications: int
    standard_error: float


@dataclass(frozen=True)
class Decomposition:
    bias2: float
    variance: float
    noise: float
    total_mse: float


def mse(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise ValueError(f"shape mismatch: {predictions.shape} vs {targets.shape}")
    if len(predictions) == 0:
        raise ValueError("mse of empty vectors")
    return float(np.mean((predictions - targets) ** 2))


def percent_decrease(err_bagging: float, err_other: float) -> float:
    """Percent by which ``err_other`` improves on ``err_bagging`` (positive = better)."""
    if not err_bagging > 0:
        raise ValueError(f"reference error must be positive, got {err_bagging!r}")
    return (err_bagging - err_other) / err_bagging * 100.0


def eq1_ensemble_variance(gamma: float, sigma2: float, B: int) -> float:
    """Variance of the mean of ``B`` equicorrelated variables of variance ``sigma2``."""
    if not -1.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [-1, 1], got {gamma!r}")
    if B < 1:
        raise ValueError(f"B must be positive, got {B!r}")
    return gamma * sigma2 + (1.0 - gamma) / B * sigma2


def dof_from_replications(Y: np.ndarray, Yhat: np.ndarray, sigma2: float) -> DofEstimate:
    """Covariance DoF from an (R, n) stack of responses and fitted values.

    ``dof = sum_i Cov_r(yhat_i, y_i) / sigma2`` with the unbiased (R - 1)
    covariance; the standard error is the leave-one-replication-out
    jackknife.
    """
    Y = np.asarray(Y, dtype=np.float64)
    Yhat = np.asarray(Yhat, dtype=np.float64)
    R = Y.shape[0]
    if R < 3:
        raise ValueError(f"need at least 3 replications for a jackknife SE, got {R}")
    # center per point before forming sums to limit cancellation
    Yc = Y - Y.mean(axis=0)
    Hc = Yhat - Yhat.mean(axis=0)
    s_xy = (Yc * Hc).sum(axis=0)
    dof = s_xy.sum() / (R - 1) / sigma2
    # leave replication r out: sums over the remaining R - 1 rows
    s_x = -Hc
    s_y = -Yc
    loo_xy = s_xy[None, :] - Hc * Yc
    loo_cov = (loo_xy - s_x * s_y / (R - 1)) / (R - 2)
    loo = loo_cov.sum(axis=1) / sigma2
    se = np.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2))
    return DofEstimate(float(dof), R, float(se))


def effective_dof(fit_procedure: Callable[[np.ndarray, np.ndarray], np.ndarray],
                  X: np.ndarray, truth: np.ndarray, sigma2: float, R: int,
                  rng: RngStream) -> DofEstimate:
    """Monte-Carlo effective degrees of freedom at a fixed design.

    Each replication draws fresh Gaussian noise around ``truth``, refits with
    ``fit_procedure(X, y)`` and keeps the in-sample fitted values.
    """
    if R < 3:
        raise ValueError(f"R must be at least 3, got {R}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    X = np.asarray(X, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    n = len(truth)
    Y = truth + rng.generator().normal(0.0, np.sqrt(sigma2), size=(R, n))
    Yhat = np.empty_like(Y)
    for r in range(R):
        fitted = np.asarray(fit_procedure(X, Y[r]), dtype=np.float64)
        if fitted.shape != (n,):
            raise ValueError(f"fit_procedure returned shape {fitted.shape}, expected ({n},)")
        Yhat[r] = fitted
    return dof_from_replications(Y, Yhat, sigma2)


def forest_fit_procedure(n_trees: int, mtry: float, max_leaf_nodes, seed: int,
                         min_samples_leaf: int = 1, min_samples_split: int = 2):
    """In-sample fitted values of a regression forest with a fixed seed."""
    tc = TreeConfig(mtry, max_leaf_nodes, min_samples_leaf, "regression", min_samples_split)
    cfg = ForestConfig(n_trees, tc, seed)

    def fit(X, y):
        return fit_forest(Dataset(X, y), cfg).predict(X)

    return fit


@dataclass(frozen=True)
class DofMatch:
    maxnodes: int
    target_dof: float
    dof: Dict[int, DofEstimate] = field(default_factory=dict)
    monotone: bool = True


class DofMatchError(ValueError):
    pass


def match_trim_dof(target_dof: float, X: np.ndarray, truth: np.ndarray, sigma2: float,
                   rng: RngStream, maxnodes_grid: Sequence[int] = DEFAULT_MAXNODES_GRID,
                   R: int = 100, n_trees: int = 100, forest_seed: int = 0,
                   min_samples_leaf: int = 1, min_samples_split: int = 2) -> DofMatch:
    """Pick the TRIM leaf budget whose ensemble DoF is closest to ``target_dof``.

    Every grid value is evaluated on the same noise replications (``rng``)
    and forest seed, so the estimates are directly comparable.  The scan stops
    at the first grid value whose DoF exceeds the target.
    """
    grid = [int(g) for g in maxnodes_grid]
    if not grid or grid != sorted(grid):
        raise ValueError("maxnodes_grid must be non-empty and sorted ascending")
    estimates: Dict[int, DofEstimate] = {}
    for g in grid:
        fit = forest_fit_procedure(n_trees, 1.0, g, forest_seed, min_samples_leaf,
                                   min_samples_split)
        estimates[g] = effective_dof(fit, X, truth, sigma2, R, rng)
        log.debug("maxnodes=%d dof=%.3f", g, estimates[g].dof)
        if g == grid[0] and target_dof < estimates[g].dof:
            raise DofMatchError(f"target DoF {target_dof:.3f} is below the DoF "
                                f"{estimates[g].dof:.3f} at the smallest maxnodes {g}")
        if estimates[g].dof >= target_dof:
            break
    else:
        raise DofMatchError(f"target DoF {target_dof:.3f} exceeds the DoF "
                            f"{estimates[grid[-1]].dof:.3f} at the largest maxnodes {grid[-1]}")
    dofs = [estimates[g].dof for g in estimates]
    monotone = all(b >= a for a, b in zip(dofs, dofs[1:]))
    # min over |dof - target|; iteration order makes ties go to the smaller budget
    best = min(estimates, key=lambda g: abs(estimates[g].dof - target_dof))
    return DofMatch(best, float(target_dof), estimates, monotone)


def bias_variance_decompose(trial_predictions, truth, sigma2: float) -> Decomposition:
    """Squared bias, variance and noise from repeated fits on one test set.

    ``trial_predictions`` is (T, n_test); bias and variance are computed per
    test point over trials (unbiased variance) and then averaged.
    """
    P = np.asarray(trial_predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError("need a (T, n_test) prediction matrix with T >= 2")
    if P.shape[1] != truth.shape[0]:
        raise ValueError(f"{P.shape[1]} predictions per trial but {truth.shape[0]} test points")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    bias2 = float(np.mean((truth - P.mean(axis=0)) ** 2))
    variance = float(np.mean(P.var(axis=0, ddof=1)))
    noise = float(sigma2)
    return Decomposition(bias2, variance, noise, bias2 + variance + noise)
