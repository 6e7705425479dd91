"""Fold plans, subset routing and cross-validated model ensembles.

A :class:`CvEnsemble` holds one model per (fold, group). Every training row
gets an out-of-fold prediction from the model of its own group that did not
see its fold. Test rows are predicted by averaging the fold models of their
group (log1p space), or by a single full-data refit when ``refit_full`` is
set. Groups that are unseen, or too small to train on, route to a global
model fitted on all groups.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .linear import LinearModel, fit_linear_baseline, predict_linear
from .model import GbtModel, GbtParams, fit_gbt, predict_gbt

logger = logging.getLogger(__name__)

GLOBAL = "__global__"
FULL = -1
SUBSET_KEYS = {
    "none": (),
    "meter": ("meter",),
    "site_id": ("site_id",),
    "primary_use": ("primary_use",),
    "building_meter": ("building_id", "meter"),
}


class PlanError(ValueError):
    pass


@dataclass
class FoldPlan:
    kind: str
    k: int
    assignment: np.ndarray

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def valid_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)


def make_fold_plan(matrix, kind: str = "by_month", k: int = 12) -> FoldPlan:
    """Split rows into ``k`` folds.

    ``by_month``: calendar months (in time order) are dealt into ``k``
    contiguous blocks; with 12 months and ``k=12`` each fold is one month.
    ``by_row_block``: ``k`` contiguous, near-equal blocks in row-key order.
    """
    if k < 2:
        raise PlanError("k must be >= 2")
    n = matrix.n_rows
    if kind == "by_month":
        ts = pd.DatetimeIndex(matrix.keys["timestamp"])
        month = ts.year.to_numpy() * 12 + ts.month.to_numpy() - 1
        months, pos = np.unique(month, return_inverse=True)
        if k > len(months):
            raise PlanError(f"by_month with k={k} needs >= {k} months, data spans {len(months)}")
        assignment = (pos * k) // len(months)
    elif kind == "by_row_block":
        if k > n:
            raise PlanError(f"k={k} exceeds row count {n}")
        order = np.lexsort((matrix.keys["timestamp"].to_numpy(), matrix.keys["meter"].to_numpy(),
                            matrix.keys["building_id"].to_numpy()))
        assignment = np.empty(n, dtype=np.int64)
        assignment[order] = (np.arange(n) * k) // n
    else:
        raise PlanError(f"unknown fold plan kind {kind!r}")
    return FoldPlan(kind, k, assignment.astype(np.int64))


@dataclass
class SubsetPlan:
    key: str
    routing: dict = field(default_factory=dict)  # group label -> model id

    def __post_init__(self):
        if self.key not in SUBSET_KEYS:
            raise PlanError(f"unknown subset key {self.key!r}; known: {sorted(SUBSET_KEYS)}")

    def labels(self, matrix) -> np.ndarray:
        cols = SUBSET_KEYS[self.key]
        if not cols:
            return np.full(matrix.n_rows, "all", dtype=object)
        parts = [matrix.keys[c].to_numpy(dtype=np.int64).astype(str) for c in cols]
        lab = parts[0].astype(object)
        for p in parts[1:]:
            lab = lab + "_" + p.astype(object)
        return lab

    def route(self, matrix) -> np.ndarray:
        """Model id per row; groups without a model route to the global model."""
        lab = self.labels(matrix)
        return np.array([self.routing.get(g, GLOBAL) for g in lab], dtype=object)


# ---------------------------------------------------------------------------
# learners


def _fit(learner, params, X, y, valid=None):
    if learner == "gbt":
        return fit_gbt((X, y), params, valid)
    if learner == "linear":
        return fit_linear_baseline((X, y))
    raise PlanError(f"unknown learner {learner!r}")


def _predict(model, X):
    if isinstance(model, GbtModel):
        return predict_gbt(model, X)
    return predict_linear(model, X)


@dataclass
class CvEnsemble:
    """Models keyed by (fold, group); fold ``-1`` holds full-data refits.

    ``fallback`` maps fold to the global model used for groups that have
    no model of their own.
    """

    learner: str
    params: GbtParams | None
    fold_plan: FoldPlan
    subset_plan: SubsetPlan
    models: dict = field(default_factory=dict)
    fallback: dict = field(default_factory=dict)
    oof: np.ndarray | None = None
    refit_full: bool = False
    warnings: list[str] = field(default_factory=list)

    def model_for(self, fold: int, mid: str):
        model = self.models.get((fold, mid)) or self.fallback.get(fold)
        if model is None:
            raise PlanError(f"no model (or global fallback) for fold {fold}, group {mid}")
        return model

    def predict(self, matrix) -> np.ndarray:
        """Test-time predictions in log1p space."""
        route = self.subset_plan.route(matrix)
        out = np.zeros(matrix.n_rows)
        folds = [FULL] if self.refit_full else list(range(self.fold_plan.k))
        for mid in sorted(set(route)):
            rows = np.flatnonzero(route == mid)
            X = matrix.X[rows]
            acc = np.zeros(len(rows))
            for f in folds:
                acc += _predict(self.model_for(f, mid), X)
            out[rows] = acc / len(folds)
        return out

    def save(self, directory) -> None:
        """Write ``ensemble.json`` plus one JSON file per model."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = sorted(self.models.items()) + sorted(
            ((f, GLOBAL), m) for f, m in self.fallback.items())
        index = []
        for i, ((fold, mid), model) in enumerate(entries):
            name = f"model_{i:04d}.json"
            with open(d / name, "w", encoding="utf-8") as fh:
                json.dump(model.to_dict(), fh)
            index.append({"fold": fold, "model_id": mid, "file": name})
        meta = {
            "learner": self.learner,
            "params": None if self.params is None else asdict(self.params),
            "fold_plan": {"kind": self.fold_plan.kind, "k": self.fold_plan.k},
            "subset": {"key": self.subset_plan.key, "routing": self.subset_plan.routing},
            "refit_full": self.refit_full,
            "models": index,
            "warnings": self.warnings,
        }
        (d / "ensemble.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        np.save(d / "fold_assignment.npy", self.fold_plan.assignment)
        np.save(d / "oof.npy", self.oof)

    @classmethod
    def load(cls, directory) -> "CvEnsemble":
        d = Path(directory)
        meta = json.loads((d / "ensemble.json").read_text())
        loader = GbtModel.from_dict if meta["learner"] == "gbt" else LinearModel.from_dict
        models, fallback = {}, {}
        for entry in meta["models"]:
            model = loader(json.loads((d / entry["file"]).read_text()))
            if entry["model_id"] == GLOBAL:
                fallback[entry["fold"]] = model
            else:
                models[(entry["fold"], entry["model_id"])] = model
        fp = FoldPlan(meta["fold_plan"]["kind"], meta["fold_plan"]["k"],
                      np.load(d / "fold_assignment.npy"))
        return cls(
            meta["learner"],
            None if meta["params"] is None else GbtParams(**meta["params"]),
            fp,
            SubsetPlan(meta["subset"]["key"], meta["subset"]["routing"]),
            models,
            fallback,
            np.load(d / "oof.npy"),
            meta["refit_full"],
            meta["warnings"],
        )


def fit_cv_ensemble(
    matrix,
    params: GbtParams | None,
    fold_plan: FoldPlan,
    subset_plan: SubsetPlan,
    learner: str = "gbt",
    min_group_rows: int = 200,
    refit_full: bool = False,
) -> CvEnsemble:
    """Train one model per (fold, group) and collect out-of-fold predictions.

    Groups smaller than ``min_group_rows`` are routed to a global model
    trained on all rows (with a warning). For any subset key other than
    ``none`` a global model is always trained, so unseen test groups have
    somewhere to go; when it can only ever serve test rows (``refit_full``
    and every group has all its fold models) just its full refit is fitted,
    with the mean best iteration over all groups. When ``params.early_stopping_rounds`` is set, each fold
    model stops on its held-out rows. With ``refit_full`` every group is
    refitted on all of its rows using the mean best iteration of its fold
    models.
    """
    if matrix.target is None:
        raise PlanError("training matrix has no target")
    if len(fold_plan.assignment) != matrix.n_rows:
        raise PlanError("fold plan does not match the matrix")
    if learner not in ("gbt", "linear"):
        raise PlanError(f"unknown learner {learner!r}")
    params = params or GbtParams()
    y = matrix.target
    labels = subset_plan.labels(matrix)
    routing, warnings = {}, []
    for g in sorted(set(labels)):
        size = int((labels == g).sum())
        if subset_plan.key != "none" and size < min_group_rows:
            msg = f"group {g} has {size} rows < {min_group_rows}; routed to global model"
            logger.warning(msg)
            warnings.append(msg)
        else:
            routing[g] = g
    plan = SubsetPlan(subset_plan.key, routing)
    ens = CvEnsemble(learner, params if learner == "gbt" else None, fold_plan, plan,
                     refit_full=refit_full, warnings=warnings)
    min_rows = max(params.min_samples_leaf, matrix.X.shape[1] if learner == "linear" else 1)

    def train(rows, fold):
        if fold == FULL:
            tr, va = rows, rows[:0]
        else:
            held = fold_plan.assignment[rows] == fold
            tr, va = rows[~held], rows[held]
        if len(tr) < min_rows:
            return None
        valid = None
        if learner == "gbt" and params.early_stopping_rounds and len(va):
            valid = (matrix.X[va], y[va])
        return _fit(learner, params, matrix.X[tr], y[tr], valid)

    all_best: list[int] = []

    def refit(rows, best):
        p = params
        if best:
            p = replace(params, n_trees=int(round(np.mean(best))), early_stopping_rounds=None)
        return _fit(learner, p, matrix.X[rows], y[rows])

    def train_all_folds(rows, mid):
        out, best = {}, []
        for f in range(fold_plan.k):
            model = train(rows, f)
            if model is None:
                warnings.append(f"group {mid} fold {f}: too few training rows; using global model")
                continue
            out[f] = model
            if isinstance(model, GbtModel) and model.best_iteration is not None:
                best.append(model.best_iteration + 1)
        all_best.extend(best)
        if refit_full:
            out[FULL] = refit(rows, best)
        return out

    for g in sorted(routing):
        for f, model in train_all_folds(np.flatnonzero(labels == g), g).items():
            ens.models[(f, g)] = model
    if subset_plan.key != "none":
        all_rows = np.arange(matrix.n_rows)
        covered = all((f, g) in ens.models for g in routing for f in range(fold_plan.k))
        if refit_full and covered and len(routing) == len(set(labels)):
            # out-of-fold predictions never need the global model, so only the
            # test-time fallback for unseen groups is trained
            ens.fallback = {FULL: refit(all_rows, all_best)}
        else:
            ens.fallback = train_all_folds(all_rows, GLOBAL)

    oof = np.empty(matrix.n_rows)
    route = plan.route(matrix)
    for f in range(fold_plan.k):
        held = np.flatnonzero(fold_plan.assignment == f)
        for mid in sorted(set(route[held])):
            rows = held[route[held] == mid]
            oof[rows] = _predict(ens.model_for(f, mid), matrix.X[rows])
    ens.oof = oof
    return ens
