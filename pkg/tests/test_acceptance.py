"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line (collected again in the
terminal summary) and then asserts.  Runtime budgets are part of the
criteria, so they are measured and enforced too.  The full file takes
roughly half an hour on a single core.
"""
import filecmp
import json
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from forestlab import (Dataset, RngStream, TreeConfig, bias_variance_decompose, effective_dof,
                       fit_tree)
from forestlab import dgp as dgps
from forestlab.analysis import forest_fit_procedure
from forestlab.harness import ExperimentConfig, group_depths, run_experiment, validate_outputs

pytestmark = pytest.mark.slow

MINUTE = 60.0


def partition_sse(y, groups):
    """Training SSE of a partition, summed in a fixed order so both sides agree bitwise."""
    total = 0.0
    for g in sorted(groups, key=min):
        vals = y[np.sort(np.asarray(g))]
        total += float(np.sum((vals - vals.mean()) ** 2))
    return total


def oracle_best_split(X, y, rows):
    """Exhaustive search over every feature and every midpoint threshold."""
    parent = np.sum((y[rows] - y[rows].mean()) ** 2)
    best = None
    for j in range(X.shape[1]):
        values = np.unique(X[rows, j])
        for lo, hi in zip(values[:-1], values[1:]):
            t = (lo + hi) / 2
            left = rows[X[rows, j] <= t]
            right = rows[X[rows, j] > t]
            dec = (parent - np.sum((y[left] - y[left].mean()) ** 2)
                   - np.sum((y[right] - y[right].mean()) ** 2))
            if best is None or dec > best[0]:
                best = (dec, left, right)
    return best


def oracle_partitions(X, y):
    """Best-first greedy CART by brute force; the partition after every expansion."""
    leaves = [np.arange(len(y))]
    history = [list(leaves)]
    while True:
        cands = [(oracle_best_split(X, y, leaf), i) for i, leaf in enumerate(leaves)]
        cands = [(s, i) for s, i in cands if s is not None and s[0] > 0]
        if not cands:
            return history
        (dec, left, right), i = max(cands, key=lambda c: c[0][0])
        leaves = leaves[:i] + leaves[i + 1:] + [left, right]
        history.append(list(leaves))


def tree_partition(tree, X):
    ids = tree.apply(X)
    return [np.flatnonzero(ids == leaf) for leaf in np.unique(ids)]


def campaign(out_dir, **kw):
    return ExperimentConfig.from_dict({"output_dir": str(out_dir), **kw})


@pytest.fixture(scope="module")
def runs_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def hidden2d_single(runs_dir):
    config = campaign(runs_dir, recipe="HIDDEN2D_SINGLE", snr=[6.0], trials=20)
    start = time.perf_counter()
    table = run_experiment(config)
    return table, time.perf_counter() - start


def test_criterion_01_split_oracle(record_criterion):
    start = time.perf_counter()
    gen = np.random.default_rng(2024)
    mismatches = comparisons = 0
    for _ in range(200):
        n, p = int(gen.integers(2, 31)), int(gen.integers(1, 4))
        # a coarse grid forces repeated values and ties in some columns
        X = np.where(gen.random((n, p)) < 0.5, gen.integers(0, 4, (n, p)), gen.random((n, p)))
        y = gen.normal(size=n)
        data = Dataset(X, y)
        history = oracle_partitions(X, y)
        for k in range(2, len(history) + 1):
            tree = fit_tree(data, np.arange(n), TreeConfig(1.0, k, 1, "regression"))
            comparisons += 1
            mismatches += partition_sse(y, tree_partition(tree, X)) != partition_sse(y, history[k - 1])
        full = fit_tree(data, np.arange(n), TreeConfig(1.0, None, 1, "regression"))
        comparisons += 1
        mismatches += partition_sse(y, tree_partition(full, X)) != partition_sse(y, history[-1])
    elapsed = time.perf_counter() - start
    passed = mismatches == 0 and elapsed < MINUTE
    assert record_criterion(1, "split-oracle equivalence", passed,
                            f"{mismatches} mismatches in {comparisons} expansions, {elapsed:.1f}s")


def test_criterion_02_dof_sanity(record_criterion):
    start = time.perf_counter()
    n = 200
    gen = np.random.default_rng(7)
    X = gen.normal(size=(n, 5))
    truth = X @ np.arange(1.0, 6.0)
    design = np.column_stack([np.ones(n), X])

    def ols(X_, y):
        return design @ np.linalg.lstsq(design, y, rcond=None)[0]

    hat_trace = float(np.trace(design @ np.linalg.pinv(design)))
    rng = RngStream(11)
    results = {
        "ols": (effective_dof(ols, X, truth, 1.0, 500, rng.child(0)), hat_trace),
        "constant": (effective_dof(lambda X_, y: np.full(n, 3.0), X, truth, 1.0, 500, rng.child(1)), 0.0),
        "identity": (effective_dof(lambda X_, y: y.copy(), X, truth, 1.0, 500, rng.child(2)), float(n)),
    }
    elapsed = time.perf_counter() - start
    # a fit that ignores y has zero covariance in every replication, so SE is 0 and the match exact
    ok = {k: abs(est.dof - ref) <= 3 * est.standard_error for k, (est, ref) in results.items()}
    detail = ", ".join(f"{k} {est.dof:.3f}±{est.standard_error:.3f} (ref {ref:g})"
                       for k, (est, ref) in results.items())
    passed = all(ok.values()) and elapsed < 2 * MINUTE
    assert record_criterion(2, "DoF sanity", passed, f"{detail}, {elapsed:.1f}s")


def test_criterion_03_dof_decreases_with_mtry(record_criterion):
    start = time.perf_counter()
    n, snr = 200, 3.0
    design = dgps.noiseless_points("MARS", n, 0, RngStream(3).child(0))
    sigma2 = dgps.calibrate_sigma2("MARS", snr)
    est = {}
    for mtry in (0.33, 1.0):
        fit = forest_fit_procedure(100, mtry, 200, seed=5, min_samples_split=6)
        # same noise replications for both mtry values
        est[mtry] = effective_dof(fit, design.features, design.truth, sigma2, 100, RngStream(3).child(1))
    elapsed = time.perf_counter() - start
    gap = est[1.0].dof - est[0.33].dof
    se = np.hypot(est[1.0].standard_error, est[0.33].standard_error)
    passed = gap > 2 * se and elapsed < 10 * MINUTE
    assert record_criterion(3, "DoF-vs-mtry trend", passed,
                            f"DoF(0.33)={est[0.33].dof:.2f} DoF(1.0)={est[1.0].dof:.2f} "
                            f"gap={gap:.2f} > 2SE={2 * se:.2f}, {elapsed:.0f}s")


def test_criterion_04_trim_null_result(runs_dir, record_criterion):
    start = time.perf_counter()
    config = campaign(runs_dir, recipe="TRIM_VS_SFS", n=[200], trials=100)
    table = run_experiment(config)
    elapsed = time.perf_counter() - start
    means = table.groupby(["model", "snr"])["pct_test_decrease"].mean()
    trim, sfs = means["trim"], means["sfs"]
    lowest = min(config.snr)
    passed = bool((trim.abs() <= 2.0).all()) and sfs[lowest] > 2.0 and elapsed <= 60 * MINUTE
    assert record_criterion(4, "TRIM null result", passed,
                            f"TRIM range [{trim.min():+.2f}%, {trim.max():+.2f}%], "
                            f"SFS at SNR {lowest:g}: {sfs[lowest]:+.2f}%, {elapsed:.0f}s")


def test_criterion_05_hidden2d_headline(hidden2d_single, record_criterion):
    table, elapsed = hidden2d_single
    sfs = table[table.model != "bagging"]
    test_dec, train_dec = sfs.pct_test_decrease.mean(), sfs.pct_train_decrease.mean()
    passed = test_dec >= 15.0 and train_dec > 0 and elapsed < 15 * MINUTE
    assert record_criterion(5, "Hidden2D headline", passed,
                            f"test {test_dec:.1f}%, train {train_dec:.1f}% over "
                            f"{sfs.trial.nunique()} seeds, {elapsed:.0f}s")


@pytest.mark.parametrize("recipe", ["HMARS_SWEEP", "HIDDEN2D_SWEEP"])
def test_criterion_06_snr_trend(runs_dir, record_criterion, recipe):
    start = time.perf_counter()
    config = campaign(runs_dir, recipe=recipe, trials=100)
    table = run_experiment(config)
    elapsed = time.perf_counter() - start
    curve = table[table.model != "bagging"].groupby("snr")["pct_test_decrease"].mean()
    rho = spearmanr(curve.index, curve.values).statistic
    passed = len(curve) == 10 and bool((curve > 0).all()) and rho > 0.5 and elapsed <= 60 * MINUTE
    assert record_criterion(6, f"hidden-pattern SNR trend ({config.dgp[0]})", passed,
                            f"min {curve.min():+.2f}% over {len(curve)} SNR points, "
                            f"Spearman {rho:.2f}, {elapsed:.0f}s")


def test_criterion_07_bias_variance(runs_dir, record_criterion):
    start = time.perf_counter()
    config = campaign(runs_dir, recipe="BVD_SWEEP", dgp=["MARS", "HMARS"], snr=[6.0, 0.042],
                      mtry=[0.33, 1.0], trials=100)
    table = run_experiment(config)
    elapsed = time.perf_counter() - start
    exact = bool((table.bias2 + table.variance + table.noise == table.total_mse).all())
    # the identity also holds on an arbitrary prediction stack
    gen = np.random.default_rng(1)
    d = bias_variance_decompose(gen.normal(size=(7, 13)), gen.normal(size=13), 0.3)
    exact &= d.bias2 + d.variance + d.noise == d.total_mse
    b = table.set_index(["dgp", "snr", "mtry"])["bias2"]
    checks = {
        "hMARS@6 lower": b["HMARS", 6.0, 0.33] < b["HMARS", 6.0, 1.0],
        "MARS@6 not lower": b["MARS", 6.0, 0.33] >= b["MARS", 6.0, 1.0],
        "hMARS@0.042 not lower": b["HMARS", 0.042, 0.33] >= b["HMARS", 0.042, 1.0],
    }
    passed = exact and all(checks.values()) and elapsed <= 60 * MINUTE
    detail = "; ".join(f"{k} ({b[d_, s, 0.33]:.2f} vs {b[d_, s, 1.0]:.2f})"
                       for k, (d_, s) in zip(checks, [("HMARS", 6.0), ("MARS", 6.0), ("HMARS", 0.042)]))
    failed = [k for k, v in checks.items() if not v]
    assert record_criterion(7, "bias-variance identity and directions", passed,
                            f"identity exact={exact}; {detail}; failed={failed}, {elapsed:.0f}s")


def test_criterion_08_first_depth(runs_dir, record_criterion):
    start = time.perf_counter()
    config = campaign(runs_dir, recipe="FIRST_DEPTH", dgp=["HMARS"], extra_noise_features=[5],
                      mtry=[0.1, 0.5, 1.0], snr=[6.0], n=[1000], trials=20)
    table = run_experiment(config)
    elapsed = time.perf_counter() - start
    depths = group_depths(table).loc[("HMARS", 5)]
    noise, hidden = depths["noise"], depths["hidden"]
    passed = (noise[min(config.mtry)] < noise[1.0] and hidden[0.5] < hidden[1.0]
              and elapsed < 20 * MINUTE)
    assert record_criterion(8, "first-depth behavior", passed,
                            f"noise {noise[1.0]:.2f} -> {noise[min(config.mtry)]:.2f} "
                            f"(mtry 1.0 -> {min(config.mtry)}), hidden {hidden[1.0]:.2f} -> "
                            f"{hidden[0.5]:.2f} (mtry 1.0 -> 0.5), {elapsed:.0f}s")


def test_criterion_09_band_localization(hidden2d_single, record_criterion):
    table, elapsed = hidden2d_single
    wins = []
    for trial in range(5):
        rows = table[table.trial == trial].set_index("model")
        bag = rows.loc["bagging"]
        sfs = rows.drop("bagging").iloc[0]
        wins.append(bag.band_test_mse >= 2 * bag.outside_test_mse
                    and sfs.band_test_mse < bag.band_test_mse)
    first = table[table.trial == 0].set_index("model")
    ratio = first.loc["bagging", "band_test_mse"] / first.loc["bagging", "outside_test_mse"]
    # the five seeds are a subset of the criterion-5 run, so its runtime is an upper bound
    passed = sum(wins) >= 3 and elapsed < 15 * MINUTE
    assert record_criterion(9, "error-band localization", passed,
                            f"{sum(wins)}/5 seeds; seed 0 band/outside ratio {ratio:.1f}x")


def test_criterion_10_determinism(runs_dir, tmp_path, record_criterion):
    start = time.perf_counter()
    base = dict(recipe="TRIM_VS_SFS", n=[200], snr=[0.1, 1.0, 6.0], trials=4, n_trees=20,
                dof_replications=10)
    one = campaign(tmp_path / "w1", **base)
    eight = campaign(tmp_path / "w8", **base)
    run_experiment(one, workers=1)
    run_experiment(eight, workers=8)
    same_workers = all(filecmp.cmp(one.run_dir / f, eight.run_dir / f, shallow=False)
                       for f in ("results.csv", "dof_match.csv"))

    h2d = dict(recipe="HIDDEN2D_SINGLE", snr=[6.0], n=[400], trials=3, n_trees=30)
    a, b = campaign(tmp_path / "h1", **h2d), campaign(tmp_path / "h8", **h2d)
    run_experiment(a, workers=1)
    run_experiment(b, workers=8)
    point_files = sorted(p.relative_to(a.run_dir) for p in (a.run_dir / "points").iterdir())
    same_workers &= filecmp.cmp(a.run_dir / "results.csv", b.run_dir / "results.csv", shallow=False)
    same_workers &= all(filecmp.cmp(a.run_dir / f, b.run_dir / f, shallow=False) for f in point_files)

    # cut both tables mid-row and resume
    for f in ("results.csv", "dof_match.csv"):
        path = eight.run_dir / f
        text = path.read_bytes()
        path.write_bytes(text[: len(text) // 2 + 7])
    run_experiment(eight, workers=8, resume=True)
    resumed = all(filecmp.cmp(one.run_dir / f, eight.run_dir / f, shallow=False)
                  for f in ("results.csv", "dof_match.csv"))

    configs = [one, eight, a, b]
    for recipe_dir in runs_dir.iterdir():
        for run_dir in recipe_dir.iterdir():
            manifest = json.loads((run_dir / "manifest.json").read_text())
            configs.append(ExperimentConfig.from_dict(manifest["config"]))
    valid, errors = 0, []
    for c in configs:
        try:
            validate_outputs(c)
            valid += 1
        except (ValueError, FileNotFoundError) as exc:
            errors.append(f"{c.recipe}: {exc}")
    elapsed = time.perf_counter() - start
    passed = same_workers and resumed and not errors and elapsed < 10 * MINUTE
    assert record_criterion(10, "determinism and resume", passed,
                            f"1 vs 8 workers identical={same_workers}, resume identical={resumed}, "
                            f"{valid}/{len(configs)} campaigns validate {errors}, {elapsed:.0f}s")
