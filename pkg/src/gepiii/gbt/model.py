"""Histogram gradient-boosted regression trees (squared error).

Features are quantile-binned once on the training data; the bin edges are
frozen into the model. Trees grow leaf-wise (best-gain leaf first) up to
``max_leaves`` leaves. With squared error, gradients are ``pred - y`` and
hessians are 1, so each tree is a Newton step on the residuals.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

FORMAT_NAME = "gepiii-gbt"
FORMAT_VERSION = 1
MAX_BINS = 256
BINNING_SUBSAMPLE = 200_000


class GbtError(ValueError):
    pass


@dataclass
class GbtParams:
    n_trees: int = 500
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 20
    n_bins: int = 255
    l2_leaf_regularization: float = 1.0
    feature_subsample: float = 1.0
    seed: int = 0
    early_stopping_rounds: int | None = None
    min_split_gain: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise GbtError("learning_rate must be in (0, 1]")
        if not 2 <= self.n_bins <= MAX_BINS:
            raise GbtError(f"n_bins must be in [2, {MAX_BINS}]")
        if self.max_leaves < 2:
            raise GbtError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise GbtError("min_samples_leaf must be >= 1")
        if self.n_trees < 0:
            raise GbtError("n_trees must be >= 0")
        if self.l2_leaf_regularization < 0:
            raise GbtError("l2_leaf_regularization must be >= 0")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise GbtError("feature_subsample must be in (0, 1]")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise GbtError("early_stopping_rounds must be >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> "GbtParams":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise GbtError(f"unknown GBT parameters {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# binning


def compute_bin_edges(X: np.ndarray, n_bins: int, seed: int = 0) -> list[np.ndarray]:
    """Per-feature thresholds; value ``x`` falls in bin ``searchsorted(edges, x)``.

    Features with at most ``n_bins`` distinct values get one bin per value
    (edges at midpoints). Otherwise edges are midpoint quantiles of a
    seeded subsample of at most 200k rows.
    """
    n = X.shape[0]
    if n > BINNING_SUBSAMPLE:
        idx = np.sort(np.random.default_rng(seed).choice(n, BINNING_SUBSAMPLE, replace=False))
        X = X[idx]
    edges = []
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        if len(u) <= n_bins:
            mid = (u[:-1] + u[1:]) / 2.0
            # adjacent doubles can round the midpoint up onto the right value
            mid = np.where(mid >= u[1:], u[:-1], mid)
        else:
            q = np.linspace(0.0, 100.0, n_bins + 1)[1:-1]
            mid = np.unique(np.percentile(X[:, j], q, method="midpoint"))
        edges.append(np.ascontiguousarray(mid, dtype=float))
    return edges


def bin_data(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    """Feature-major uint8 bin codes, shape (n_features, n_samples)."""
    X = np.asarray(X, dtype=float)
    out = np.empty((X.shape[1], X.shape[0]), dtype=np.uint8)
    for j, e in enumerate(edges):
        out[j] = np.searchsorted(e, X[:, j], side="left")
    return out


# ---------------------------------------------------------------------------
# model


@dataclass
class Tree:
    feature: np.ndarray
    bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "bin", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int32),
            np.asarray(d["bin"], dtype=np.int32),
            np.asarray(d["left"], dtype=np.int32),
            np.asarray(d["right"], dtype=np.int32),
            np.asarray(d["value"], dtype=float),
            np.asarray(d["gain"], dtype=float),
        )


@dataclass
class GbtModel:
    params: GbtParams
    base_score: float
    bin_edges: list[np.ndarray]
    trees: list[Tree] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    valid_trace: list[float] = field(default_factory=list)
    best_iteration: int | None = None
    feature_names: list[str] | None = None

    @property
    def n_features(self) -> int:
        return len(self.bin_edges)

    def threshold(self, feature: int, bin_: int) -> float:
        """Raw-value threshold of a split: ``x <= threshold`` goes left."""
        return float(self.bin_edges[feature][bin_])

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "base_score": self.base_score,
            "feature_names": self.feature_names,
            "bin_edges": [e.tolist() for e in self.bin_edges],
            "trees": [t.to_dict() for t in self.trees],
            "loss_trace": list(self.loss_trace),
            "valid_trace": list(self.valid_trace),
            "best_iteration": self.best_iteration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("format") != FORMAT_NAME:
            raise GbtError("not a gepiii GBT model file")
        if int(d.get("version", -1)) != FORMAT_VERSION:
            raise GbtError(f"unsupported model format version {d.get('version')}")
        return cls(
            GbtParams(**d["params"]),
            float(d["base_score"]),
            [np.asarray(e, dtype=float) for e in d["bin_edges"]],
            [Tree.from_dict(t) for t in d["trees"]],
            list(d["loss_trace"]),
            list(d.get("valid_trace", [])),
            d.get("best_iteration"),
            d.get("feature_names"),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GbtModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _flatten(trees: list[Tree]):
    if not trees:
        e = np.empty(0, dtype=np.int32)
        return e, e, e, e, np.empty(0), np.empty(0, dtype=np.int64)
    sizes = np.array([len(t.feature) for t in trees])
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(np.int64)
    cat = lambda k, dt: np.concatenate([getattr(t, k) for t in trees]).astype(dt)  # noqa: E731
    return (cat("feature", np.int32), cat("bin", np.int32), cat("left", np.int32),
            cat("right", np.int32), cat("value", float), offsets)


def _predict_binned(trees: list[Tree], binned: np.ndarray, out: np.ndarray) -> np.ndarray:
    if trees:
        feature, bin_, left, right, value, offsets = _flatten(trees)
        _kernels.predict_binned(binned, feature, bin_, left, right, value, offsets, out)
    return out


def _as_arrays(data, need_target=True):
    X = getattr(data, "X", None)
    if X is None:
        X, y = data
    else:
        y = data.target
    X = np.asarray(X, dtype=float)
    if y is None and need_target:
        raise GbtError("training data has no target")
    return X, (None if y is None else np.asarray(y, dtype=float))


def _names(data):
    return list(data.names) if hasattr(data, "names") else None


def fit_gbt(data, params: GbtParams | None = None, valid=None) -> GbtModel:
    """Fit on a FeatureMatrix (or an ``(X, y)`` pair) with target in log1p space.

    With ``valid`` and ``params.early_stopping_rounds``, boosting stops once
    the validation loss has not improved for that many rounds and the model
    is truncated to its best iteration.
    """
    params = params or GbtParams()
    X, y = _as_arrays(data)
    n, n_features = X.shape
    if n == 0:
        raise GbtError("empty training matrix")
    if n < params.min_samples_leaf:
        raise GbtError(f"{n} rows is fewer than min_samples_leaf={params.min_samples_leaf}")
    if not np.isfinite(y).all():
        raise GbtError("non-finite target values")
    if not np.isfinite(X).all():
        raise GbtError("non-finite feature values; impute before fitting")

    edges = compute_bin_edges(X, params.n_bins, params.seed)
    binned = bin_data(X, edges)
    n_bins_of = np.array([len(e) + 1 for e in edges], dtype=np.int64)
    n_bins_alloc = int(n_bins_of.max()) if n_features else 1

    base = float(y[0]) if np.all(y == y[0]) else float(np.mean(y))
    pred = np.full(n, base)
    hess = np.ones(n)
    rows = np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(params.seed)
    n_sub = max(1, int(round(params.feature_subsample * n_features)))

    vb = vy = vpred = None
    stopping = valid is not None and params.early_stopping_rounds
    if valid is not None:
        vX, vy = _as_arrays(valid)
        if vX.shape[1] != n_features:
            raise GbtError("validation feature count differs from training")
        vb = bin_data(vX, edges)
        vpred = np.full(len(vy), base)

    model = GbtModel(params, base, edges, feature_names=_names(data))
    best_loss, best_iter, since_best = np.inf, -1, 0
    for it in range(params.n_trees):
        grad = pred - y
        if n_sub < n_features:
            feats = np.sort(rng.choice(n_features, n_sub, replace=False)).astype(np.int64)
        else:
            feats = np.arange(n_features, dtype=np.int64)
        arrays = _kernels.grow_tree(
            binned, grad, hess, rows, feats, n_bins_of, n_bins_alloc,
            params.max_leaves, float(params.min_samples_leaf),
            float(params.l2_leaf_regularization), float(params.learning_rate),
            float(params.min_split_gain), pred,
        )
        tree = Tree(*arrays)
        model.trees.append(tree)
        model.loss_trace.append(float(np.mean((pred - y) ** 2)))
        if vb is not None:
            _predict_binned([tree], vb, vpred)
            vloss = float(np.mean((vpred - vy) ** 2))
            model.valid_trace.append(vloss)
            if vloss < best_loss:
                best_loss, best_iter, since_best = vloss, it, 0
            else:
                since_best += 1
                if stopping and since_best >= params.early_stopping_rounds:
                    break
    if stopping and best_iter >= 0:
        keep = best_iter + 1
        model.trees = model.trees[:keep]
        model.loss_trace = model.loss_trace[:keep]
        model.valid_trace = model.valid_trace[:keep]
        model.best_iteration = best_iter
    return model


def predict_gbt(model: GbtModel, data) -> np.ndarray:
    """Predictions in log1p space: base score plus the sum of tree outputs."""
    X = np.asarray(getattr(data, "X", data), dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise GbtError(
            f"feature count mismatch: model has {model.n_features}, data has "
            f"{X.shape[1] if X.ndim == 2 else '?'}"
        )
    binned = bin_data(X, model.bin_edges)
    out = np.full(X.shape[0], model.base_score)
    return _predict_binned(model.trees, binned, out)
