"""Seeded, resumable experiment campaigns.

A campaign is a recipe plus a config.  Work is cut into tasks (one config
point and trial, or one config point for aggregate recipes); tasks run in a
process pool and their rows are appended to CSV tables by the parent process
only.  Every random draw comes from an :class:`RngStream` whose path is
derived from the task's key, never from its position in a work queue, so
results do not depend on the worker count or on resumption.

Layout::

    <output_dir>/<recipe>/<config_hash>/
        manifest.json
        results.csv
        timings.csv          wall-clock seconds per task (not byte-stable)
        dof_match.csv        TRIM_VS_SFS only, with dof_match_timings.csv
        points/, trees/      HIDDEN2D_SINGLE only
        grids/               classification demos only
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import time
import zlib
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import dgp as dgps
from .analysis import (DEFAULT_MAXNODES_GRID, DofMatchError, bias_variance_decompose,
                       effective_dof, forest_fit_procedure, match_trim_dof, mse,
                       percent_decrease)
from .dataset import Dataset, RngStream, train_test_split
from .ensemble import Forest, ForestConfig, feature_depth_table, fit_forest
from .tree import CLASSIFICATION, REGRESSION, TreeConfig, dump_tree

log = logging.getLogger(__name__)

TRIM_VS_SFS = "TRIM_VS_SFS"
HIDDEN2D_SINGLE = "HIDDEN2D_SINGLE"
HIDDEN2D_SWEEP = "HIDDEN2D_SWEEP"
HMARS_SWEEP = "HMARS_SWEEP"
BVD_SWEEP = "BVD_SWEEP"
MTRY_NOISE_FEATURES = "MTRY_NOISE_FEATURES"
FIRST_DEPTH = "FIRST_DEPTH"
SPHERE_DEMO = "SPHERE_DEMO"
BAND2D_DEMO = "BAND2D_DEMO"
RECIPES = (TRIM_VS_SFS, HIDDEN2D_SINGLE, HIDDEN2D_SWEEP, HMARS_SWEEP, BVD_SWEEP,
           MTRY_NOISE_FEATURES, FIRST_DEPTH, SPHERE_DEMO, BAND2D_DEMO)

OUTPUT_DIR_ENV = "FORESTLAB_OUTPUT_DIR"

SNR_LOW, SNR_HIGH, SNR_POINTS = 0.042, 6.0, 10
HIDDEN_BAND = (0.6, 0.65)


def snr_grid(points: int = SNR_POINTS, low: float = SNR_LOW, high: float = SNR_HIGH):
    """Evenly log10-spaced SNR values, endpoints included."""
    return tuple(float(v) for v in np.logspace(np.log10(low), np.log10(high), points))


MTRY_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))

# per-recipe defaults; anything in a config file overrides them
RECIPE_DEFAULTS: Dict[str, dict] = {
    TRIM_VS_SFS: dict(dgp=[dgps.MARS], snr=list(snr_grid()), mtry=[0.33], n=[200, 1000],
                      n_trees=100, maxnodes=200, min_samples_split=6),
    HIDDEN2D_SINGLE: dict(dgp=[dgps.HIDDEN2D], snr=[6.0, 0.042], mtry=[0.5], n=[1000],
                          n_trees=500, maxnodes=None, trials=20),
    HIDDEN2D_SWEEP: dict(dgp=[dgps.HIDDEN2D], snr=list(snr_grid()), mtry=[0.5], n=[1000],
                         n_trees=500, maxnodes=None),
    HMARS_SWEEP: dict(dgp=[dgps.HMARS], snr=list(snr_grid()), mtry=[0.33], n=[1000],
                      n_trees=100, maxnodes=200, min_samples_split=6),
    BVD_SWEEP: dict(dgp=[dgps.MARS, dgps.MARSADD, dgps.HMARS, dgps.HMARSADD], snr=[6.0, 0.042],
                    mtry=list(MTRY_GRID), n=[1000], n_trees=100, maxnodes=200,
                    min_samples_split=6),
    MTRY_NOISE_FEATURES: dict(dgp=[dgps.HMARS, dgps.HMARSADD], snr=[6.0], mtry=list(MTRY_GRID),
                              n=[1000], extra_noise_features=[1, 3, 5], n_trees=100,
                              maxnodes=200, min_samples_split=6),
    FIRST_DEPTH: dict(dgp=[dgps.HMARS, dgps.HMARSADD], snr=[6.0], mtry=list(MTRY_GRID), n=[1000],
                      extra_noise_features=[1, 3, 5], n_trees=100, maxnodes=200,
                      min_samples_split=6, trials=20),
    SPHERE_DEMO: dict(dgp=[dgps.SPHERE3D_CLASS], snr=[], mtry=[0.33], n=[10000], n_trees=100,
                      maxnodes=8, trials=1),
    BAND2D_DEMO: dict(dgp=[dgps.BAND2D_CLASS], snr=[], mtry=[0.5], n=[10000], n_trees=100,
                      maxnodes=8, trials=1),
}

_ALLOWED_DGPS = {
    TRIM_VS_SFS: (dgps.MARS, dgps.MARSADD, dgps.HMARS, dgps.HMARSADD),
    HIDDEN2D_SINGLE: (dgps.HIDDEN2D,),
    HIDDEN2D_SWEEP: dgps.REGRESSION_DGPS,
    HMARS_SWEEP: dgps.REGRESSION_DGPS,
    BVD_SWEEP: dgps.REGRESSION_DGPS,
    MTRY_NOISE_FEATURES: dgps.REGRESSION_DGPS,
    FIRST_DEPTH: (dgps.HMARS, dgps.HMARSADD),
    SPHERE_DEMO: (dgps.SPHERE3D_CLASS,),
    BAND2D_DEMO: (dgps.BAND2D_CLASS,),
}
_CLASSIFICATION_RECIPES = (SPHERE_DEMO, BAND2D_DEMO)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One campaign.  Grid fields are lists; see ``RECIPE_DEFAULTS``.

    ``maxnodes`` bounds the bagging and SFS trees (``None`` = full depth),
    except in the classification demos where bagging and SFS are full depth
    and ``maxnodes`` is the TRIM budget.  ``n`` is the size of each generated
    dataset before the train/test split.
    """

    recipe: str
    dgp: Tuple[str, ...] = ()
    snr: Tuple[float, ...] = ()
    mtry: Tuple[float, ...] = ()
    n: Tuple[int, ...] = ()
    n_trees: int = 100
    maxnodes: Optional[int] = 200
    trials: int = 100
    master_seed: int = 0
    output_dir: str = "results"
    extra_noise_features: Tuple[int, ...] = (0,)
    train_fraction: float = 0.5
    min_samples_leaf: int = 1
    min_samples_split: int = 2
    dof_replications: int = 100
    maxnodes_grid: Tuple[int, ...] = DEFAULT_MAXNODES_GRID
    test_size: int = 2000
    grid_resolution: int = 200

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}; choose from {list(RECIPES)}")
        for name in ("dgp", "snr", "mtry", "n", "extra_noise_features", "maxnodes_grid"):
            value = getattr(self, name)
            if isinstance(value, (str, bytes)) or not isinstance(value, (list, tuple)):
                raise ValueError(f"{name} must be a list, got {value!r}")
        object.__setattr__(self, "dgp", tuple(dgps.normalize_name(d) for d in self.dgp))
        object.__setattr__(self, "snr", tuple(float(s) for s in self.snr))
        object.__setattr__(self, "mtry", tuple(float(m) for m in self.mtry))
        object.__setattr__(self, "n", tuple(_as_int(v, "n") for v in self.n))
        object.__setattr__(self, "extra_noise_features",
                           tuple(_as_int(v, "extra_noise_features") for v in self.extra_noise_features))
        object.__setattr__(self, "maxnodes_grid",
                           tuple(_as_int(v, "maxnodes_grid") for v in self.maxnodes_grid))
        required = ["dgp", "mtry", "n", "extra_noise_features"]
        if self.recipe not in _CLASSIFICATION_RECIPES:
            required.append("snr")
        for name in required:
            if not getattr(self, name):
                raise ValueError(f"{name} grid must be non-empty")
        for d in self.dgp:
            if d not in _ALLOWED_DGPS[self.recipe]:
                raise ValueError(f"recipe {self.recipe} does not accept DGP {d}; "
                                 f"allowed: {list(_ALLOWED_DGPS[self.recipe])}")
        if any(not (s > 0 and math.isfinite(s)) for s in self.snr):
            raise ValueError(f"snr values must be positive, got {list(self.snr)}")
        if any(not 0.0 < m <= 1.0 for m in self.mtry):
            raise ValueError(f"mtry values must lie in (0, 1], got {list(self.mtry)}")
        if any(v < 2 for v in self.n):
            raise ValueError(f"n values must be at least 2, got {list(self.n)}")
        if any(v < 0 for v in self.extra_noise_features):
            raise ValueError("extra_noise_features must be non-negative")
        if self.recipe == FIRST_DEPTH and any(v < 1 for v in self.extra_noise_features):
            raise ValueError("FIRST_DEPTH needs at least one appended noise feature")
        for name in ("n_trees", "trials", "dof_replications", "test_size", "grid_resolution",
                     "min_samples_leaf"):
            object.__setattr__(self, name, _as_int(getattr(self, name), name))
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        object.__setattr__(self, "master_seed", _as_int(self.master_seed, "master_seed"))
        object.__setattr__(self, "min_samples_split",
                           _as_int(self.min_samples_split, "min_samples_split"))
        if self.maxnodes is not None:
            object.__setattr__(self, "maxnodes", _as_int(self.maxnodes, "maxnodes"))
            if self.maxnodes < 2:
                raise ValueError(f"maxnodes must be at least 2 or null, got {self.maxnodes}")
        elif self.recipe in _CLASSIFICATION_RECIPES:
            raise ValueError("the classification demos need a TRIM maxnodes budget")
        if self.recipe == BVD_SWEEP or self.recipe == MTRY_NOISE_FEATURES:
            if self.trials < 2:
                raise ValueError("bias-variance recipes need trials >= 2")
        if self.recipe == TRIM_VS_SFS and self.dof_replications < 3:
            raise ValueError("dof_replications must be at least 3")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be at least 2")
        if not self.maxnodes_grid or list(self.maxnodes_grid) != sorted(set(self.maxnodes_grid)):
            raise ValueError("maxnodes_grid must be strictly increasing")
        if not self.output_dir:
            raise ValueError("output_dir must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Recipe defaults overlaid with ``d``; unknown keys are an error."""
        if "recipe" not in d:
            raise ValueError("config needs a 'recipe' field")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        recipe = str(d["recipe"]).upper()
        if recipe not in RECIPES:
            raise ValueError(f"unknown recipe {d['recipe']!r}; choose from {list(RECIPES)}")
        merged = dict(RECIPE_DEFAULTS[recipe])
        merged.update(d)
        merged["recipe"] = recipe
        if "output_dir" not in d:
            merged["output_dir"] = os.environ.get(OUTPUT_DIR_ENV, "results")
        return cls(**merged)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def config_hash(self) -> str:
        # the output location does not change the results
        d = self.to_dict()
        del d["output_dir"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.recipe / self.config_hash


def _as_int(v, name):
    if isinstance(v, bool) or int(v) != v:
        raise ValueError(f"{name} must be an integer, got {v!r}")
    return int(v)


def default_config(recipe: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"recipe": recipe, **overrides})


# ---------------------------------------------------------------------------
# table schemas

KEY_COLUMNS = ["task_id", "config_hash"]
_F, _I, _S, _B = "float", "int", "str", "bool"

SCHEMAS: Dict[str, Dict[str, str]] = {
    "trim_results": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, snr=_F, trial=_I, model=_S,
                         mtry=_F, maxnodes=_I, train_mse=_F, test_mse=_F, test_mse_diff=_F,
                         pct_test_decrease=_F, dof=_F, seed=_I),
    "dof_match": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, snr=_F, mtry=_F, sigma2=_F,
                      design_size=_I, replications=_I, sfs_dof=_F, sfs_dof_se=_F,
                      bagging_dof=_F, bagging_dof_se=_F, trim_maxnodes=_I, trim_dof=_F,
                      trim_dof_se=_F, monotone=_B, grid_dofs=_S),
    "sweep_results": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, snr=_F, trial=_I, model=_S,
                          mtry=_F, maxnodes=_I, train_mse=_F, test_mse=_F,
                          pct_train_decrease=_F, pct_test_decrease=_F, seed=_I),
    "hidden2d_results": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, snr=_F, trial=_I,
                             model=_S, mtry=_F, maxnodes=_I, train_mse=_F, test_mse=_F,
                             pct_train_decrease=_F, pct_test_decrease=_F, band_train_mse=_F,
                             outside_train_mse=_F, band_test_mse=_F, outside_test_mse=_F,
                             seed=_I),
    "bvd_results": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, snr=_F,
                        extra_noise_features=_I, mtry=_F, maxnodes=_I, trials=_I, test_size=_I,
                        bias2=_F, variance=_F, noise=_F, total_mse=_F, mean_test_mse=_F,
                        seed=_I),
    "depth_results": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, snr=_F,
                          extra_noise_features=_I, mtry=_F, trial=_I, feature=_S,
                          feature_index=_I, group=_S, mean_first_depth=_F, usage_fraction=_F,
                          seed=_I),
    "demo_results": dict(task_id=_I, config_hash=_S, dgp=_S, n=_I, trial=_I, model=_S, mtry=_F,
                         maxnodes=_I, train_accuracy=_F, bayes_agreement=_F,
                         band_positive_fraction=_F, step_agreement=_F, seed=_I),
    "timings": dict(task_id=_I, config_hash=_S, wall_time=_F),
}

RESULTS_SCHEMA = {
    TRIM_VS_SFS: "trim_results", HIDDEN2D_SINGLE: "hidden2d_results",
    HIDDEN2D_SWEEP: "sweep_results", HMARS_SWEEP: "sweep_results", BVD_SWEEP: "bvd_results",
    MTRY_NOISE_FEATURES: "bvd_results", FIRST_DEPTH: "depth_results",
    SPHERE_DEMO: "demo_results", BAND2D_DEMO: "demo_results",
}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _check_value(text: str, kind: str) -> bool:
    if kind == _S:
        return True
    if kind == _B:
        return text in ("true", "false")
    if text == "":
        # empty marks "not applicable" (e.g. an unbounded maxnodes)
        return True
    try:
        if kind == _I:
            int(text)
        else:
            float(text)
    except ValueError:
        return False
    return True


def validate_table(path, schema: str | Dict[str, str]) -> int:
    """Check header and every cell of a CSV against a schema; returns the row count."""
    columns = SCHEMAS[schema] if isinstance(schema, str) else schema
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(columns):
            raise ValueError(f"{path}: header {header} does not match schema {list(columns)}")
        count = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                raise ValueError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(row)}")
            for (name, kind), text in zip(columns.items(), row):
                if not _check_value(text, kind):
                    raise ValueError(f"{path}:{lineno}: column {name} is not a valid {kind}: {text!r}")
            count += 1
    return count


def validate_outputs(config: ExperimentConfig) -> Dict[str, int]:
    """Validate every table a finished campaign wrote; returns row counts by file."""
    run_dir = config.run_dir
    counts = {"results.csv": validate_table(run_dir / "results.csv", RESULTS_SCHEMA[config.recipe]),
              "timings.csv": validate_table(run_dir / "timings.csv", "timings")}
    if config.recipe == TRIM_VS_SFS:
        counts["dof_match.csv"] = validate_table(run_dir / "dof_match.csv", "dof_match")
        counts["dof_match_timings.csv"] = validate_table(run_dir / "dof_match_timings.csv", "timings")
    return counts


# ---------------------------------------------------------------------------
# engine

def _stable_key(*parts) -> int:
    return zlib.crc32(json.dumps(parts, sort_keys=True).encode())


def _stream(config: ExperimentConfig, *parts) -> RngStream:
    """Stream addressed by a semantic key, independent of task order."""
    return RngStream(config.master_seed, (_stable_key(*parts),))


def _forest_seed(stream: RngStream) -> int:
    return int(stream.generator().integers(0, 2 ** 31 - 1))


class _Table:
    """Append-only CSV owned by the parent process."""

    def __init__(self, path: Path, columns: Sequence[str], config_hash: str):
        self.path = path
        self.columns = list(columns)
        self.config_hash = config_hash

    def load(self) -> Dict[int, List[List[str]]]:
        """Rows grouped by task id; a truncated final task is dropped."""
        if not self.path.exists():
            return {}
        text = self.path.read_text()
        lines = text.splitlines(keepends=True)
        if not lines:
            return {}
        header = next(csv.reader([lines[0]]))
        if header != self.columns:
            raise ValueError(f"{self.path}: existing header does not match the recipe schema")
        truncated = not lines[-1].endswith("\n")
        by_task: Dict[int, List[List[str]]] = {}
        last = None
        for row in csv.reader(lines[1:]):
            if not row:
                continue
            if len(row) != len(self.columns):
                truncated_row = True
            else:
                truncated_row = False
            if not truncated_row and row[1] != self.config_hash:
                raise ValueError(f"{self.path}: row with config hash {row[1]!r} does not belong "
                                 f"to this config ({self.config_hash})")
            tid = int(row[0])
            if truncated_row:
                by_task.pop(tid, None)
                last = None
                continue
            by_task.setdefault(tid, []).append(row)
            last = tid
        if truncated and last is not None:
            by_task.pop(last, None)
        return by_task

    def rewrite(self, by_task: Dict[int, List[List[str]]]) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for tid in sorted(by_task):
                writer.writerows(by_task[tid])
        os.replace(tmp, self.path)

    def append(self, rows: List[List[str]]) -> None:
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerows(rows)
            fh.flush()


def _timed(fn, config, key):
    start = time.perf_counter()
    rows = fn(config, key)
    return rows, time.perf_counter() - start


def _run_stage(config: ExperimentConfig, filename: str, schema: str, keys: List[dict],
               fn: Callable[[ExperimentConfig, dict], List[dict]], workers: int,
               resume: bool) -> pd.DataFrame:
    """Run ``fn`` for every key not yet in ``filename``; returns the sorted table."""
    columns = list(SCHEMAS[schema])
    table = _Table(config.run_dir / filename, columns, config.config_hash)
    timing_name = "timings.csv" if filename == "results.csv" else filename.replace(".csv", "_timings.csv")
    timings = _Table(config.run_dir / timing_name, list(SCHEMAS["timings"]), config.config_hash)
    done = table.load() if resume else {}
    times = timings.load() if resume else {}
    # start from a clean, canonical file so appends land after complete tasks only
    table.rewrite(done)
    if not timings.path.exists() or not resume:
        timings.rewrite({})
    pending = [(tid, key) for tid, key in enumerate(keys) if tid not in done]
    log.info("%s/%s: %d tasks, %d pending", config.recipe, filename, len(keys), len(pending))

    def to_rows(tid, dict_rows):
        out = []
        for r in dict_rows:
            r = {"task_id": tid, "config_hash": config.config_hash, **r}
            if list(r) != columns:
                raise RuntimeError(f"task {tid} produced columns {list(r)}, expected {columns}")
            out.append([_fmt(v) for v in r.values()])
        return out

    def record(tid, dict_rows, seconds):
        rows = to_rows(tid, dict_rows)
        table.append(rows)
        done[tid] = rows
        t_row = [_fmt(tid), config.config_hash, _fmt(round(seconds, 6))]
        timings.append([t_row])
        times.setdefault(tid, []).append(t_row)

    if workers <= 1 or len(pending) <= 1:
        for tid, key in pending:
            try:
                rows, seconds = _timed(fn, config, key)
            except DofMatchError:
                raise
            except Exception as exc:
                raise RuntimeError(f"{config.recipe} task {key} failed: {exc}") from exc
            record(tid, rows, seconds)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_timed, fn, config, key): (tid, key) for tid, key in pending}
            remaining = set(futures)
            while remaining:
                finished, remaining = wait(remaining, return_when=FIRST_EXCEPTION)
                for fut in finished:
                    tid, key = futures[fut]
                    exc = fut.exception()
                    if exc is not None:
                        for other in remaining:
                            other.cancel()
                        if isinstance(exc, DofMatchError):
                            raise exc
                        raise RuntimeError(f"{config.recipe} task {key} failed: {exc}") from exc
                    rows, seconds = fut.result()
                    record(tid, rows, seconds)

    table.rewrite(done)
    timings.rewrite(times)
    # the default C parser can be off by one ulp; keys and identities need exact floats
    return pd.read_csv(table.path, keep_default_na=True, float_precision="round_trip")


def _write_manifest(config: ExperimentConfig) -> None:
    from . import __version__

    manifest = {"recipe": config.recipe, "config_hash": config.config_hash,
                "config": config.to_dict(), "version": __version__,
                "master_seed": config.master_seed}
    path = config.run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_run_dir(config: ExperimentConfig, resume: bool) -> None:
    run_dir = config.run_dir
    if run_dir.exists() and not resume:
        # a fresh run of the same config replaces the earlier one entirely
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(config)


def _split(gen: dgps.GeneratedData, config: ExperimentConfig, stream: RngStream):
    sp = train_test_split(gen.dataset, config.train_fraction, stream)
    return gen.dataset.subset(sp.train), gen.dataset.subset(sp.test), sp


def _forest(data: Dataset, config: ExperimentConfig, mtry: float, maxnodes, seed: int,
            task: str = REGRESSION) -> Forest:
    min_split = config.min_samples_split if task == REGRESSION else 2
    tc = TreeConfig(mtry, maxnodes, config.min_samples_leaf, task, min_split)
    return fit_forest(data, ForestConfig(config.n_trees, tc, seed))


def _trial_stream(config: ExperimentConfig, dgp: str, n: int, snr, extra: int,
                  trial: int) -> RngStream:
    """Per-trial stream shared by every model and mtry value (common random numbers)."""
    return _stream(config, "trial", dgp, n, snr, extra).child(trial)


def _regression_trial(config, key):
    """Generate, split and return (train, test, split, forest seed) for one trial."""
    stream = _trial_stream(config, key["dgp"], key["n"], key["snr"], 0, key["trial"])
    gen = dgps.generate(dgps.DgpSpec(key["dgp"], key["n"], key["snr"]), rng=stream.child(0))
    train, test, sp = _split(gen, config, stream.child(1))
    return gen, train, test, sp, _forest_seed(stream.child(2))


def _eval(forest: Forest, train: Dataset, test: Dataset):
    return (mse(forest.predict(train.features), train.response),
            mse(forest.predict(test.features), test.response))


def _trial_keys(config: ExperimentConfig) -> List[dict]:
    return [dict(dgp=d, n=n, snr=s, trial=t)
            for d in config.dgp for n in config.n for s in config.snr
            for t in range(config.trials)]


# ---------------------------------------------------------------------------
# TRIM vs SFS

def _dof_match_task(config: ExperimentConfig, key: dict) -> List[dict]:
    dgp, n, snr, mtry = key["dgp"], key["n"], key["snr"], key["mtry"]
    design_size = int(round(config.train_fraction * n))
    # one fixed design per (dgp, n); noise replications per (dgp, n, snr)
    design = dgps.noiseless_points(dgp, design_size, 0, _stream(config, "design", dgp, n))
    sigma2 = dgps.calibrate_sigma2(dgp, snr)
    noise = _stream(config, "dof-noise", dgp, n, snr)
    seed = _forest_seed(_stream(config, "dof-forest", dgp, n, snr))
    R = config.dof_replications
    X, f = design.features, design.truth

    def dof(m, maxnodes):
        fit = forest_fit_procedure(config.n_trees, m, maxnodes, seed, config.min_samples_leaf,
                                   config.min_samples_split)
        return effective_dof(fit, X, f, sigma2, R, noise)

    sfs = dof(mtry, config.maxnodes)
    bag = dof(1.0, config.maxnodes)
    try:
        match = match_trim_dof(sfs.dof, X, f, sigma2, noise, config.maxnodes_grid, R,
                               config.n_trees, seed, config.min_samples_leaf,
                               config.min_samples_split)
    except DofMatchError as exc:
        raise DofMatchError(f"DoF matching failed for dgp={dgp} n={n} snr={snr:g} "
                            f"mtry={mtry:g}: {exc}") from exc
    trim = match.dof[match.maxnodes]
    grid = ";".join(f"{g}:{e.dof!r}" for g, e in match.dof.items())
    return [dict(dgp=dgp, n=n, snr=snr, mtry=mtry, sigma2=sigma2, design_size=design_size,
                 replications=R, sfs_dof=sfs.dof, sfs_dof_se=sfs.standard_error,
                 bagging_dof=bag.dof, bagging_dof_se=bag.standard_error,
                 trim_maxnodes=match.maxnodes, trim_dof=trim.dof,
                 trim_dof_se=trim.standard_error, monotone=match.monotone, grid_dofs=grid)]


def _trim_trial_task(config: ExperimentConfig, key: dict, matches: dict) -> List[dict]:
    gen, train, test, _, seed = _regression_trial(config, key)
    base = dict(dgp=key["dgp"], n=key["n"], snr=key["snr"], trial=key["trial"])
    first = matches[(key["dgp"], key["n"], key["snr"], config.mtry[0])]
    bag_train, bag_test = _eval(_forest(train, config, 1.0, config.maxnodes, seed), train, test)
    rows = [dict(base, model="bagging", mtry=1.0, maxnodes=config.maxnodes, train_mse=bag_train,
                 test_mse=bag_test, test_mse_diff=0.0, pct_test_decrease=0.0,
                 dof=first["bagging_dof"], seed=seed)]
    for mtry in config.mtry:
        m = matches[(key["dgp"], key["n"], key["snr"], mtry)]
        for model, mt, maxnodes, dof in (("sfs", mtry, config.maxnodes, m["sfs_dof"]),
                                         ("trim", 1.0, m["trim_maxnodes"], m["trim_dof"])):
            tr, te = _eval(_forest(train, config, mt, maxnodes, seed), train, test)
            rows.append(dict(base, model=model if len(config.mtry) == 1 else f"{model}@{mtry:g}",
                             mtry=mt, maxnodes=maxnodes, train_mse=tr, test_mse=te,
                             test_mse_diff=bag_test - te,
                             pct_test_decrease=percent_decrease(bag_test, te), dof=dof,
                             seed=seed))
    return rows


def run_trim_vs_sfs(config: ExperimentConfig, workers: int = 1, resume: bool = False) -> pd.DataFrame:
    """Bagging vs SFS vs DoF-matched TRIM over an SNR sweep.

    TRIM's leaf budget is matched once per (dgp, n, snr, mtry) and stored in
    ``dof_match.csv``; trials then reuse it.
    """
    _require(config, TRIM_VS_SFS)
    _prepare_run_dir(config, resume)
    match_keys = [dict(dgp=d, n=n, snr=s, mtry=m) for d in config.dgp for n in config.n
                  for s in config.snr for m in config.mtry]
    matches = _run_stage(config, "dof_match.csv", "dof_match", match_keys, _dof_match_task,
                         workers, resume)
    lookup = {}
    for rec in matches.to_dict("records"):
        lookup[(rec["dgp"], int(rec["n"]), float(rec["snr"]), float(rec["mtry"]))] = {
            "trim_maxnodes": int(rec["trim_maxnodes"]), "sfs_dof": float(rec["sfs_dof"]),
            "bagging_dof": float(rec["bagging_dof"]), "trim_dof": float(rec["trim_dof"])}
    return _run_stage(config, "results.csv", "trim_results", _trial_keys(config),
                      partial(_trim_trial_task, matches=lookup), workers, resume)


# ---------------------------------------------------------------------------
# bagging vs SFS sweeps

def _sweep_task(config: ExperimentConfig, key: dict, band: bool = False) -> List[dict]:
    gen, train, test, sp, seed = _regression_trial(config, key)
    base = dict(dgp=key["dgp"], n=key["n"], snr=key["snr"], trial=key["trial"])
    models = [("bagging", 1.0)] + [("sfs", m) for m in config.mtry]
    fitted = {}
    rows = []
    for model, mtry in models:
        forest = _forest(train, config, mtry, config.maxnodes, seed)
        fitted[(model, mtry)] = forest
        tr, te = _eval(forest, train, test)
        rows.append(dict(base, model=model, mtry=mtry, maxnodes=config.maxnodes, train_mse=tr,
                         test_mse=te))
    bag = rows[0]
    for r in rows:
        r["pct_train_decrease"] = percent_decrease(bag["train_mse"], r["train_mse"])
        r["pct_test_decrease"] = percent_decrease(bag["test_mse"], r["test_mse"])
    if band:
        _hidden2d_outputs(config, key, gen, train, test, sp, fitted, rows)
    for r in rows:
        r["seed"] = seed
    return rows


def _in_band(X: np.ndarray) -> np.ndarray:
    x2 = X[:, dgps.HIDDEN_FEATURES[dgps.HIDDEN2D][0]]
    return (x2 >= HIDDEN_BAND[0]) & (x2 <= HIDDEN_BAND[1])


def _band_means(sq: np.ndarray, inside: np.ndarray):
    nan = float("nan")
    return (float(sq[inside].mean()) if inside.any() else nan,
            float(sq[~inside].mean()) if (~inside).any() else nan)


def _hidden2d_outputs(config, key, gen, train, test, sp, fitted, rows) -> None:
    """Per-point squared errors and one example tree per ensemble."""
    data = gen.dataset
    stem = f"snr{key['snr']:g}_n{key['n']}_trial{key['trial']}"
    is_train = np.zeros(data.n, dtype=bool)
    is_train[sp.train] = True
    cols = {"row": np.arange(data.n), "split": np.where(is_train, "train", "test")}
    for j, name in enumerate(data.feature_names):
        cols[name] = data.features[:, j]
    cols["y"] = data.response
    cols["f_true"] = data.truth
    inside_all = _in_band(data.features)
    run_dir = config.run_dir
    (run_dir / "points").mkdir(exist_ok=True)
    (run_dir / "trees").mkdir(exist_ok=True)
    for r, ((model, mtry), forest) in zip(rows, fitted.items()):
        label = model if model == "bagging" else f"{model}_mtry{mtry:g}"
        sq = (forest.predict(data.features) - data.response) ** 2
        cols[f"sqerr_{label}"] = sq
        r["band_train_mse"], r["outside_train_mse"] = _band_means(sq[is_train], inside_all[is_train])
        r["band_test_mse"], r["outside_test_mse"] = _band_means(sq[~is_train], inside_all[~is_train])
        _atomic_write(run_dir / "trees" / f"{stem}_{label}.txt", dump_tree(forest.trees[0], 0))
    frame = pd.DataFrame(cols)
    _atomic_write(run_dir / "points" / f"{stem}.csv",
                  frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_snr_sweep(config: ExperimentConfig, workers: int = 1, resume: bool = False) -> pd.DataFrame:
    """Bagging vs SFS train/test MSE at every (dgp, n, snr, trial)."""
    _require(config, HIDDEN2D_SWEEP, HMARS_SWEEP)
    _prepare_run_dir(config, resume)
    return _run_stage(config, "results.csv", "sweep_results", _trial_keys(config), _sweep_task,
                      workers, resume)


def run_hidden2d_single(config: ExperimentConfig, workers: int = 1,
                        resume: bool = False) -> pd.DataFrame:
    """Hidden2D runs with per-point error files and serialized example trees."""
    _require(config, HIDDEN2D_SINGLE)
    _prepare_run_dir(config, resume)
    return _run_stage(config, "results.csv", "hidden2d_results", _trial_keys(config),
                      partial(_sweep_task, band=True), workers, resume)


# ---------------------------------------------------------------------------
# bias-variance

def _bvd_task(config: ExperimentConfig, key: dict) -> List[dict]:
    dgp, n, snr, extra, mtry = key["dgp"], key["n"], key["snr"], key["extra"], key["mtry"]
    # the test set is shared by every snr, n and mtry of a dgp
    test = dgps.noiseless_points(dgp, config.test_size, extra, _stream(config, "test", dgp, extra))
    n_train = int(round(config.train_fraction * n))
    sigma2 = dgps.calibrate_sigma2(dgp, snr, extra)
    P = np.empty((config.trials, config.test_size))
    for t in range(config.trials):
        stream = _trial_stream(config, dgp, n, snr, extra, t)
        gen = dgps.generate(dgps.DgpSpec(dgp, n_train, snr, extra), rng=stream.child(0))
        P[t] = _forest(gen.dataset, config, mtry, config.maxnodes,
                       _forest_seed(stream.child(2))).predict(test.features)
    d = bias_variance_decompose(P, test.truth, sigma2)
    # average error against the noiseless truth, plus noise: comparable to total_mse
    emp = float(np.mean((P - test.truth) ** 2)) + sigma2
    return [dict(dgp=dgp, n=n, snr=snr, extra_noise_features=extra, mtry=mtry,
                 maxnodes=config.maxnodes, trials=config.trials, test_size=config.test_size,
                 bias2=d.bias2, variance=d.variance, noise=d.noise, total_mse=d.total_mse,
                 mean_test_mse=emp, seed=config.master_seed)]


def run_bvd_sweep(config: ExperimentConfig, workers: int = 1, resume: bool = False) -> pd.DataFrame:
    """Squared bias, variance and noise per (dgp, n, snr, noise features, mtry).

    All mtry values of a config point see the same training draws and test
    set, so their differences are paired.
    """
    _require(config, BVD_SWEEP, MTRY_NOISE_FEATURES)
    _prepare_run_dir(config, resume)
    keys = [dict(dgp=d, n=n, snr=s, extra=e, mtry=m) for d in config.dgp for n in config.n
            for s in config.snr for e in config.extra_noise_features for m in config.mtry]
    return _run_stage(config, "results.csv", "bvd_results", keys, _bvd_task, workers, resume)


# ---------------------------------------------------------------------------
# first-use depth

def feature_groups(dgp: str, p: int) -> List[str]:
    """``hidden`` / ``smooth`` / ``noise`` label per feature column."""
    dgp = dgps.normalize_name(dgp)
    hidden = set(dgps.HIDDEN_FEATURES.get(dgp, ()))
    base = dgps.BASE_P[dgp]
    return ["hidden" if j in hidden else "smooth" if j < base else "noise" for j in range(p)]


def _depth_task(config: ExperimentConfig, key: dict) -> List[dict]:
    dgp, n, snr, extra, mtry, trial = (key["dgp"], key["n"], key["snr"], key["extra"],
                                       key["mtry"], key["trial"])
    stream = _trial_stream(config, dgp, n, snr, extra, trial)
    gen = dgps.generate(dgps.DgpSpec(dgp, n, snr, extra), rng=stream.child(0))
    seed = _forest_seed(stream.child(2))
    forest = _forest(gen.dataset, config, mtry, config.maxnodes, seed)
    mean, usage = feature_depth_table(forest)
    groups = feature_groups(dgp, gen.dataset.p)
    return [dict(dgp=dgp, n=n, snr=snr, extra_noise_features=extra, mtry=mtry, trial=trial,
                 feature=name, feature_index=j, group=groups[j], mean_first_depth=float(mean[j]),
                 usage_fraction=float(usage[j]), seed=seed)
            for j, name in enumerate(gen.dataset.feature_names)]


def run_first_depth(config: ExperimentConfig, workers: int = 1, resume: bool = False) -> pd.DataFrame:
    """Average first-use depth and usage per feature, one row per (feature, mtry, trial)."""
    _require(config, FIRST_DEPTH)
    _prepare_run_dir(config, resume)
    keys = [dict(dgp=d, n=n, snr=s, extra=e, mtry=m, trial=t)
            for d in config.dgp for n in config.n for s in config.snr
            for e in config.extra_noise_features for t in range(config.trials)
            for m in config.mtry]
    return _run_stage(config, "results.csv", "depth_results", keys, _depth_task, workers, resume)


def group_depths(table: pd.DataFrame) -> pd.DataFrame:
    """Trial-mean of the per-group average first depth, indexed by (dgp, extra, mtry, group).

    Features a forest never splits on have a NaN depth and are skipped in
    the group average.
    """
    per_trial = (table.groupby(["dgp", "extra_noise_features", "mtry", "trial", "group"])
                 ["mean_first_depth"].mean())
    return per_trial.groupby(["dgp", "extra_noise_features", "mtry", "group"]).mean().unstack("group")


# ---------------------------------------------------------------------------
# classification demos

def lattice(resolution: int, dims: int = 2) -> np.ndarray:
    """Cell-centre lattice over the unit square, x1 varying fastest."""
    ticks = (np.arange(resolution) + 0.5) / resolution
    mesh = np.meshgrid(*([ticks] * dims), indexing="xy")
    return np.column_stack([m.ravel() for m in mesh])


def step_agreement(X: np.ndarray, labels: np.ndarray, thresholds=None) -> float:
    """Best agreement between ``labels`` and a rule ``1(x1 > t)`` over ``thresholds``."""
    if thresholds is None:
        thresholds = np.linspace(0.4, 0.6, 41)
    return float(max(np.mean(labels == (X[:, 0] > t)) for t in thresholds))


def _demo_task(config: ExperimentConfig, key: dict) -> List[dict]:
    dgp, n, trial = key["dgp"], key["n"], key["trial"]
    stream = _trial_stream(config, dgp, n, None, 0, trial)
    gen = dgps.generate(dgps.DgpSpec(dgp, n), rng=stream.child(0))
    seed = _forest_seed(stream.child(2))
    data = gen.dataset
    models = [("bagging", 1.0, None), ("trim", 1.0, config.maxnodes)]
    models += [("sfs", m, None) for m in config.mtry]
    two_d = dgp == dgps.BAND2D_CLASS
    if two_d:
        points = lattice(config.grid_resolution)
        inside = _in_band(points)
    else:
        points = data.features
    prob = dgps.eval_truth(dgp, points)
    bayes = (prob > 0.5).astype(np.int64)
    cols = {f"x{j + 1}": points[:, j] for j in range(points.shape[1])}
    if not two_d:
        cols["y"] = data.response
    cols["p_true"] = prob
    rows = []
    for model, mtry, maxnodes in models:
        tc = TreeConfig(mtry, maxnodes, config.min_samples_leaf, CLASSIFICATION)
        forest = fit_forest(data, ForestConfig(config.n_trees, tc, seed))
        label = model if model != "sfs" else f"sfs_mtry{mtry:g}"
        pred = forest.predict(points)
        cols[f"pred_{label}"] = pred
        train_acc = float(np.mean(forest.predict(data.features) == data.response))
        nan = float("nan")
        rows.append(dict(dgp=dgp, n=n, trial=trial, model=model, mtry=mtry, maxnodes=maxnodes,
                         train_accuracy=train_acc, bayes_agreement=float(np.mean(pred == bayes)),
                         band_positive_fraction=float(np.mean(pred[inside] == 1)) if two_d else nan,
                         step_agreement=step_agreement(points[~inside], pred[~inside]) if two_d
                         else nan,
                         seed=seed))
    grid_dir = config.run_dir / "grids"
    grid_dir.mkdir(exist_ok=True)
    _atomic_write(grid_dir / f"{dgp.lower()}_n{n}_trial{trial}.csv",
                  pd.DataFrame(cols).to_csv(index=False, float_format="%.17g",
                                            lineterminator="\n"))
    return rows


def run_classification_demos(config: ExperimentConfig, workers: int = 1,
                             resume: bool = False) -> pd.DataFrame:
    """Bagging / TRIM / SFS classifiers with exported prediction grids."""
    _require(config, SPHERE_DEMO, BAND2D_DEMO)
    _prepare_run_dir(config, resume)
    keys = [dict(dgp=d, n=n, trial=t) for d in config.dgp for n in config.n
            for t in range(config.trials)]
    return _run_stage(config, "results.csv", "demo_results", keys, _demo_task, workers, resume)


# ---------------------------------------------------------------------------

def _require(config: ExperimentConfig, *recipes: str) -> None:
    if config.recipe not in recipes:
        raise ValueError(f"this operation runs {list(recipes)}, not {config.recipe}")


RUNNERS = {
    TRIM_VS_SFS: run_trim_vs_sfs, HIDDEN2D_SINGLE: run_hidden2d_single,
    HIDDEN2D_SWEEP: run_snr_sweep, HMARS_SWEEP: run_snr_sweep, BVD_SWEEP: run_bvd_sweep,
    MTRY_NOISE_FEATURES: run_bvd_sweep, FIRST_DEPTH: run_first_depth,
    SPHERE_DEMO: run_classification_demos, BAND2D_DEMO: run_classification_demos,
}


def run_experiment(config: ExperimentConfig, workers: int = 1, resume: bool = False) -> pd.DataFrame:
    """Run the campaign named by ``config.recipe`` and validate its tables."""
    if int(workers) != workers or workers < 1:
        raise ValueError(f"workers must be a positive integer, got {workers!r}")
    table = RUNNERS[config.recipe](config, int(workers), resume)
    validate_outputs(config)
    return table
