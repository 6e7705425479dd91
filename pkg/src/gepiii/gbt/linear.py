"""Ridge-regularised least squares, the sanity floor for the tree models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RIDGE_EPS = 1e-6


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    ridge: float = RIDGE_EPS

    @property
    def n_features(self) -> int:
        return len(self.coef)

    def to_dict(self) -> dict:
        return {"coef": self.coef.tolist(), "intercept": self.intercept, "ridge": self.ridge}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.asarray(d["coef"], dtype=float), float(d["intercept"]), float(d["ridge"]))


def fit_linear_baseline(data, ridge: float = RIDGE_EPS) -> LinearModel:
    """Minimise ``||X b + c - y||^2 + ridge * ||b||^2``; the intercept is not penalised.

    Solved as an augmented least-squares problem on centred data.
    """
    if hasattr(data, "X"):
        X, y = data.X, data.target
    else:
        X, y = data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < p:
        raise ValueError(f"need n_rows >= n_features, got {n} < {p}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite input to linear baseline")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    A = np.vstack([X - x_mean, np.sqrt(ridge) * np.eye(p)])
    b = np.concatenate([y - y_mean, np.zeros(p)])
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return LinearModel(coef, float(y_mean - x_mean @ coef), ridge)


def predict_linear(model: LinearModel, data) -> np.ndarray:
    X = np.asarray(getattr(data, "X", data), dtype=float)
    if X.shape[1] != model.n_features:
        raise ValueError("feature count mismatch")
    return X @ model.coef + model.intercept
