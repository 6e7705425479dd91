import numpy as np
import pytest

from gepiii.gbt import (
    GbtModel,
    GbtParams,
    fit_gbt,
    fit_linear_baseline,
    predict_gbt,
    predict_linear,
)
from gepiii.gbt.model import GbtError
from oracles import exact_greedy_split, ridge_normal_equations


def _step_data(n=200):
    x = np.linspace(-1, 1, n)
    x = x[x != 0]
    y = np.where(x < 0, 0.0, 10.0)
    return x.reshape(-1, 1), y


def test_step_exact_fit():
    X, y = _step_data()
    params = GbtParams(n_trees=1, learning_rate=1.0, max_leaves=2, min_samples_leaf=1,
                       l2_leaf_regularization=0.0)
    model = fit_gbt((X, y), params)
    assert model.base_score == 5.0
    leaves = model.trees[0].value[model.trees[0].feature < 0]
    assert sorted(leaves.tolist()) == [-5.0, 5.0]
    np.testing.assert_array_equal(predict_gbt(model, X), y)


def test_constant_target():
    X = np.random.default_rng(0).normal(size=(100, 3))
    y = np.full(100, 2.5)
    model = fit_gbt((X, y), GbtParams(n_trees=5, min_samples_leaf=5))
    assert (predict_gbt(model, X) == 2.5).all()
    for tree in model.trees:
        assert (tree.value == 0).all()


def test_zero_trees():
    X = np.random.default_rng(0).normal(size=(50, 2))
    y = X[:, 0]
    model = fit_gbt((X, y), GbtParams(n_trees=0, min_samples_leaf=1))
    assert (predict_gbt(model, X) == y.mean()).all()


def test_first_split_matches_exact_greedy():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n, p = int(rng.integers(20, 200)), int(rng.integers(1, 5))
        X = np.round(rng.normal(size=(n, p)), 2)
        y = X[:, 0] * rng.normal() + rng.normal(size=n)
        params = GbtParams(n_trees=1, max_leaves=2, min_samples_leaf=3, n_bins=256,
                           l2_leaf_regularization=1.0)
        model = fit_gbt((X, y), params)
        tree = model.trees[0]
        gain, feat, (lo, hi) = exact_greedy_split(X, y, model.base_score, 1.0, min_leaf=3)
        assert tree.feature[0] == feat
        assert abs(tree.gain[0] - gain) <= 1e-9
        assert lo <= model.threshold(feat, tree.bin[0]) < hi


def test_loss_trace_non_increasing_and_bounded():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(500, 4))
    y = np.sin(X[:, 0]) + X[:, 1] ** 2 + rng.normal(0, 0.1, 500)
    model = fit_gbt((X, y), GbtParams(n_trees=60, min_samples_leaf=5))
    assert all(b <= a for a, b in zip(model.loss_trace, model.loss_trace[1:]))
    pred = predict_gbt(model, rng.normal(size=(300, 4)) * 3)
    bound = abs(model.base_score) + len(model.trees) * max(np.abs(t.value).max() for t in model.trees)
    assert np.isfinite(pred).all() and (np.abs(pred) <= bound).all()


def test_row_order_invariance():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 3))
    y = X @ [1.0, -2.0, 0.5]
    model = fit_gbt((X, y), GbtParams(n_trees=20, min_samples_leaf=5))
    perm = rng.permutation(300)
    np.testing.assert_array_equal(predict_gbt(model, X[perm]), predict_gbt(model, X)[perm])


def test_larger_lambda_shrinks_leaves():
    X, y = _step_data()
    y = y + np.random.default_rng(3).normal(0, 0.5, len(y))
    fits = [fit_gbt((X, y), GbtParams(n_trees=1, max_leaves=2, min_samples_leaf=1,
                                      l2_leaf_regularization=lam)) for lam in (0.0, 1.0, 10.0, 100.0)]
    ref = fits[0].trees[0]
    for a, b in zip(fits, fits[1:]):
        ta, tb = a.trees[0], b.trees[0]
        assert (ta.feature == ref.feature).all() and (tb.bin == ref.bin).all()
        assert (np.abs(tb.value) <= np.abs(ta.value)).all()


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(200, 3))
    y = X[:, 0] + rng.normal(0, 0.1, 200)
    model = fit_gbt((X, y), GbtParams(n_trees=10, min_samples_leaf=5))
    model.save(tmp_path / "m.json")
    loaded = GbtModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(predict_gbt(loaded, X), predict_gbt(model, X))
    assert loaded.loss_trace == model.loss_trace


def test_early_stopping_truncates():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(400, 2))
    y = X[:, 0] + rng.normal(0, 1.0, 400)
    params = GbtParams(n_trees=300, learning_rate=0.3, min_samples_leaf=5, early_stopping_rounds=5)
    model = fit_gbt((X[:300], y[:300]), params, valid=(X[300:], y[300:]))
    assert model.best_iteration is not None
    assert len(model.trees) == model.best_iteration + 1 < 300


def test_errors():
    X = np.zeros((5, 2))
    with pytest.raises(GbtError):
        fit_gbt((X, np.zeros(5)), GbtParams(min_samples_leaf=20))
    with pytest.raises(GbtError):
        fit_gbt((X, np.array([0, 1, np.nan, 0, 0.0])), GbtParams(min_samples_leaf=1))
    model = fit_gbt((X, np.arange(5.0)), GbtParams(n_trees=1, min_samples_leaf=1))
    with pytest.raises(GbtError):
        predict_gbt(model, np.zeros((3, 3)))
    with pytest.raises(GbtError):
        GbtParams(learning_rate=0.0)
    with pytest.raises(GbtError):
        GbtParams(n_bins=300)


def test_linear_examples():
    x = np.linspace(-50, 50, 1001).reshape(-1, 1)
    m = fit_linear_baseline((x, 2 * x[:, 0]))
    assert abs(m.coef[0] - 2) < 1e-9 and abs(m.intercept) < 1e-9
    m = fit_linear_baseline((np.random.default_rng(0).normal(size=(100, 3)), np.full(100, 4.0)))
    assert abs(m.intercept - 4.0) < 1e-9 and np.abs(m.coef).max() < 1e-9


def test_linear_matches_normal_equations():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(500, 6))
    y = X @ rng.normal(size=6) + rng.normal(size=500)
    m = fit_linear_baseline((X, y))
    coef, intercept = ridge_normal_equations(X, y, 1e-6)
    np.testing.assert_allclose(predict_linear(m, X), X @ coef + intercept, rtol=0, atol=1e-8)
    with pytest.raises(ValueError):
        fit_linear_baseline((X[:3], y[:3]))
