"""In-house gradient-boosted trees, a ridge baseline, and CV/subset training."""

import numba

# prefer layers that need no TBB runtime; results do not depend on the layer
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .baselines import HourOfWeekBaseline, fit_hour_of_week_baseline  # noqa: E402
from .cv import (  # noqa: E402
    CvEnsemble,
    FoldPlan,
    PlanError,
    SubsetPlan,
    fit_cv_ensemble,
    make_fold_plan,
)
from .linear import LinearModel, fit_linear_baseline, predict_linear  # noqa: E402
from .model import GbtError, GbtModel, GbtParams, Tree, bin_data, compute_bin_edges, fit_gbt, predict_gbt  # noqa: E402

__all__ = [
    "CvEnsemble",
    "FoldPlan",
    "HourOfWeekBaseline",
    "LinearModel",
    "PlanError",
    "SubsetPlan",
    "fit_cv_ensemble",
    "fit_hour_of_week_baseline",
    "fit_linear_baseline",
    "make_fold_plan",
    "predict_linear",
    "GbtError",
    "GbtModel",
    "GbtParams",
    "Tree",
    "bin_data",
    "compute_bin_edges",
    "fit_gbt",
    "predict_gbt",
]
