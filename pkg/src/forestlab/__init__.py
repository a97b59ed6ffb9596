"""Bagging, split-feature-subsetting random forests and leaf-bounded (TRIM)
ensembles, with the simulation tooling used to compare them."""

from .analysis import (Decomposition, DofEstimate, DofMatch, DofMatchError,
                       bias_variance_decompose, effective_dof, match_trim_dof, mse,
                       percent_decrease)
from .dataset import Dataset, RngStream, bootstrap_sample, read_csv, train_test_split, write_csv
from .dgp import DgpSpec, GeneratedData, calibrate_sigma2, eval_truth, generate
from .ensemble import (Forest, ForestClassifier, ForestConfig, ForestRegressor,
                       average_first_depth, fit_forest, load_forest, predict_forest,
                       read_forest, save_forest)
from .tree import (CARTClassifier, CARTRegressor, Tree, TreeConfig, first_use_depth, fit_tree,
                   load_tree, predict_tree)

__version__ = "0.1.0"

__all__ = [
    "CARTClassifier", "CARTRegressor", "Dataset", "Decomposition", "DgpSpec", "DofEstimate",
    "DofMatch", "DofMatchError", "Forest", "ForestClassifier", "ForestConfig",
    "ForestRegressor", "GeneratedData", "RngStream", "Tree", "TreeConfig",
    "average_first_depth", "bias_variance_decompose", "bootstrap_sample", "calibrate_sigma2",
    "effective_dof", "eval_truth", "first_use_depth", "fit_forest", "fit_tree", "generate",
    "load_forest", "load_tree", "match_trim_dof", "mse", "percent_decrease", "predict_forest",
    "predict_tree", "read_csv", "read_forest", "save_forest", "train_test_split", "write_csv",
    "__version__",
]
