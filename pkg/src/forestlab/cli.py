"""``forestlab`` command-line interface.

Exit codes: 0 on success, 2 when flags or inputs fail validation (nothing is
written), 1 when the work itself fails.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import dgp as dgps
from .analysis import bias_variance_decompose, effective_dof, forest_fit_procedure
from .dataset import RngStream, read_csv
from .ensemble import ForestConfig, feature_depth_table, fit_forest, read_forest, save_forest
from .harness import OUTPUT_DIR_ENV, ExperimentConfig, run_experiment
from .tree import CLASSIFICATION, REGRESSION, TASKS, TreeConfig, dump_tree

log = logging.getLogger("forestlab")


class UsageError(Exception):
    """Invalid flags or inputs, detected before any output is written."""


def _default_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


def _out_path(arg: Optional[str], default_name: str) -> Path:
    return Path(arg) if arg else _default_dir() / default_name


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def _check_mtry(mtry: float) -> None:
    _require(0.0 < mtry <= 1.0, f"--mtry must lie in (0, 1], got {mtry}")


def _check_positive(value, flag: str) -> None:
    _require(value is not None and value > 0, f"{flag} must be positive, got {value}")


def _check_maxnodes(maxnodes) -> None:
    _require(maxnodes is None or maxnodes >= 2, f"--maxnodes must be at least 2, got {maxnodes}")


def _check_input(path: str, flag: str) -> Path:
    p = Path(path)
    _require(p.is_file(), f"{flag}: no such file {path}")
    return p


def _dgp_spec(args) -> dgps.DgpSpec:
    try:
        name = dgps.normalize_name(args.dgp)
    except ValueError as exc:
        raise UsageError(f"--dgp: {exc}") from None
    _check_positive(args.n, "--n")
    _require(args.noise_features >= 0, f"--noise-features must be non-negative, got {args.noise_features}")
    if not dgps.is_classification(name):
        _require(args.snr is not None, f"--snr is required for {name}")
        _require(args.snr > 0 and math.isfinite(args.snr), f"--snr must be positive, got {args.snr}")
    return dgps.DgpSpec(name, args.n, args.snr, args.noise_features, args.seed)


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    spec = _dgp_spec(args)
    out = _out_path(args.out, f"{spec.name.lower()}_n{spec.n}_seed{spec.seed}.csv")
    gen = dgps.generate(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    # write beside the target first so a failure leaves nothing half-written
    tmp = out.with_name(out.name + ".tmp")
    sidecar_tmp = dgps.write_generated(gen, tmp)
    os.replace(tmp, out)
    os.replace(sidecar_tmp, out.with_suffix(".json"))
    print(f"wrote {gen.dataset.n} rows to {out}")
    return 0


def cmd_fit(args) -> int:
    path = _check_input(args.data, "--data")
    _require(args.task in TASKS, f"--task must be one of {list(TASKS)}")
    _check_mtry(args.mtry)
    _check_positive(args.trees, "--trees")
    _check_maxnodes(args.maxnodes)
    _check_positive(args.min_samples_leaf, "--min-samples-leaf")
    _require(args.min_samples_split >= 2, "--min-samples-split must be at least 2")
    _check_positive(args.workers, "--workers")
    try:
        data = read_csv(path, args.task)
    except ValueError as exc:
        raise UsageError(f"--data: {exc}") from None
    out = _out_path(args.model_out, "model.forest")
    tc = TreeConfig(args.mtry, args.maxnodes, args.min_samples_leaf, args.task,
                    args.min_samples_split)
    forest = fit_forest(data, ForestConfig(args.trees, tc, args.seed), n_jobs=args.workers)
    fitted = forest.predict(data.features)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    save_forest(forest, tmp)
    os.replace(tmp, out)
    if args.task == REGRESSION:
        print(f"train_mse={float(np.mean((fitted - data.response) ** 2))!r}")
    else:
        print(f"train_accuracy={float(np.mean(fitted == data.response))!r}")
    print(f"wrote model to {out}")
    return 0


def _read_table(path: Path):
    """Feature matrix plus the optional ``y`` column of a dataset CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        rows = [r for r in reader if r]
    _require(header is not None and rows, f"--data: {path} has no data rows")
    feat = [j for j, h in enumerate(header) if h not in ("y", "f_true")]
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError:
        raise UsageError(f"--data: {path} contains non-numeric values") from None
    y = table[:, header.index("y")] if "y" in header else None
    return table[:, feat], y


def cmd_predict(args) -> int:
    model_path = _check_input(args.model, "--model")
    data_path = _check_input(args.data, "--data")
    try:
        forest = read_forest(model_path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"--model: cannot read {model_path}: {exc}") from None
    X, y = _read_table(data_path)
    _require(X.shape[1] == forest.n_features,
             f"--data has {X.shape[1]} features but the model was fit on {forest.n_features}")
    out = _out_path(args.out, "predictions.csv")
    pred = forest.predict(X)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "prediction"])
    for i, v in enumerate(pred):
        writer.writerow([i, repr(float(v)) if forest.task == REGRESSION else str(v.item())])
    _atomic_write(out, buf.getvalue())
    if y is not None:
        if forest.task == REGRESSION:
            print(f"mse={float(np.mean((pred - y) ** 2))!r}")
        else:
            print(f"accuracy={float(np.mean(pred == y))!r}")
    print(f"wrote {len(pred)} predictions to {out}")
    return 0


def cmd_dof(args) -> int:
    spec = _dgp_spec(args)
    _require(not dgps.is_classification(spec.name), "--dgp must be a regression DGP for dof")
    _check_mtry(args.mtry)
    _check_positive(args.trees, "--trees")
    _check_maxnodes(args.maxnodes)
    _require(args.replications >= 3, f"--replications must be at least 3, got {args.replications}")
    _require(args.min_samples_split >= 2, "--min-samples-split must be at least 2")
    root = RngStream(args.seed)
    design = dgps.noiseless_points(spec.name, spec.n, spec.extra_noise_features, root.child(0))
    sigma2 = dgps.calibrate_sigma2(spec.name, spec.snr)
    fit = forest_fit_procedure(args.trees, args.mtry, args.maxnodes, args.seed, 1,
                               args.min_samples_split)
    est = effective_dof(fit, design.features, design.truth, sigma2, args.replications, root.child(1))
    header = ["dgp", "n", "snr", "mtry", "maxnodes", "trees", "replications", "dof", "standard_error"]
    row = [spec.name, spec.n, repr(spec.snr), repr(args.mtry),
           "" if args.maxnodes is None else args.maxnodes, args.trees, args.replications,
           repr(est.dof), repr(est.standard_error)]
    _emit_rows(args.out, header, [row])
    return 0


def cmd_bvd(args) -> int:
    spec = _dgp_spec(args)
    _require(not dgps.is_classification(spec.name), "--dgp must be a regression DGP for bvd")
    for m in args.mtry:
        _check_mtry(m)
    _require(args.trials >= 2, f"--trials must be at least 2, got {args.trials}")
    _check_positive(args.trees, "--trees")
    _check_maxnodes(args.maxnodes)
    _check_positive(args.test_size, "--test-size")
    _require(args.min_samples_split >= 2, "--min-samples-split must be at least 2")
    root = RngStream(args.seed)
    test = dgps.noiseless_points(spec.name, args.test_size, spec.extra_noise_features, root.child(0))
    sigma2 = dgps.calibrate_sigma2(spec.name, spec.snr)
    # every mtry sees the same training draws
    train = [dgps.generate(spec, rng=root.child(1, t)).dataset for t in range(args.trials)]
    header = ["dgp", "n", "snr", "extra_noise_features", "mtry", "trials", "bias2", "variance",
              "noise", "total_mse"]
    rows = []
    for m in args.mtry:
        tc = TreeConfig(m, args.maxnodes, 1, REGRESSION, args.min_samples_split)
        P = np.array([fit_forest(d, ForestConfig(args.trees, tc, args.seed + t)).predict(test.features)
                      for t, d in enumerate(train)])
        d = bias_variance_decompose(P, test.truth, sigma2)
        rows.append([spec.name, spec.n, repr(spec.snr), spec.extra_noise_features, repr(m),
                     args.trials, repr(d.bias2), repr(d.variance), repr(d.noise), repr(d.total_mse)])
    _emit_rows(args.out, header, rows)
    return 0


def cmd_experiment(args) -> int:
    path = _check_input(args.config, "--config")
    _check_positive(args.workers, "--workers")
    try:
        config = ExperimentConfig.from_json(path)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--config: {exc}") from None
    table = run_experiment(config, workers=args.workers, resume=args.resume)
    print(f"{config.recipe}: {len(table)} rows in {config.run_dir / 'results.csv'}")
    return 0


def cmd_inspect(args) -> int:
    model_path = _check_input(args.model, "--model")
    try:
        forest = read_forest(model_path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"--model: cannot read {model_path}: {exc}") from None
    if args.tree is not None:
        _require(0 <= args.tree < len(forest.trees),
                 f"--tree {args.tree} is out of range; the model has {len(forest.trees)} trees")
        text = dump_tree(forest.trees[args.tree], args.tree)
        if args.out:
            _atomic_write(Path(args.out), text)
        else:
            sys.stdout.write(text)
        return 0
    mean, usage = feature_depth_table(forest)
    names = [f"x{j + 1}" for j in range(forest.n_features)]
    rows = [[names[j], "" if np.isnan(mean[j]) else repr(float(mean[j])), repr(float(usage[j]))]
            for j in range(forest.n_features)]
    _emit_rows(args.out, ["feature", "mean_first_depth", "usage_fraction"], rows)
    return 0


def _emit_rows(out: Optional[str], header: List[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if out:
        _atomic_write(Path(out), buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _dgp_flags(p, snr_required=False):
    p.add_argument("--dgp", required=True, help="data-generating process, e.g. mars or hidden2d")
    p.add_argument("--n", type=int, required=True, help="number of rows")
    p.add_argument("--snr", type=float, required=snr_required, help="signal-to-noise ratio")
    p.add_argument("--noise-features", type=int, default=0,
                   help="uniform noise columns appended after the DGP's own features")
    p.add_argument("--seed", type=int, default=0)


def _forest_flags(p, trees=100):
    p.add_argument("--mtry", type=float, default=1.0, help="fraction of features per split")
    p.add_argument("--trees", type=int, default=trees)
    p.add_argument("--maxnodes", type=int, default=None, help="leaf budget per tree (TRIM)")
    p.add_argument("--min-samples-split", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forestlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"forestlab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="draw a synthetic dataset")
    _dgp_flags(p)
    p.add_argument("--out", help=f"CSV path (default: ${OUTPUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a forest to a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--task", default=REGRESSION, choices=[REGRESSION, CLASSIFICATION])
    _forest_flags(p)
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="threads for tree fitting")
    p.add_argument("--model-out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict with a saved forest")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("dof", help="Monte-Carlo effective degrees of freedom")
    _dgp_flags(p, snr_required=True)
    _forest_flags(p)
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dof)

    p = sub.add_parser("bvd", help="bias-variance decomposition over mtry values")
    _dgp_flags(p, snr_required=True)
    p.add_argument("--mtry", type=float, nargs="+", default=[0.33, 1.0])
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--maxnodes", type=int, default=None)
    p.add_argument("--min-samples-split", type=int, default=2)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--test-size", type=int, default=2000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bvd)

    p = sub.add_parser("experiment", help="run a recipe from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="keep finished rows and run the rest")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("inspect", help="feature depth table or a single tree")
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--feature-depths", action="store_true")
    group.add_argument("--tree", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"forestlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"forestlab {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
