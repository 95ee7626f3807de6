"""Baseline learners over task shards."""

from .binning import BinningTable, fit_bins
from .data import TaskData
from .gbdt import GbdtModel, GbdtParams, Tree, fit_gbdt, load_model
from .linear import LinearModel, SgdParams, fit_sgd_logistic
from .metrics import auroc, logistic_grad_hess, logloss, sigmoid

__all__ = [
    "BinningTable",
    "GbdtModel",
    "GbdtParams",
    "LinearModel",
    "SgdParams",
    "TaskData",
    "Tree",
    "auroc",
    "fit_bins",
    "fit_gbdt",
    "fit_sgd_logistic",
    "load_model",
    "logistic_grad_hess",
    "logloss",
    "sigmoid",
]
