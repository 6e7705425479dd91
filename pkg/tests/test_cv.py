import numpy as np
import pandas as pd
import pytest

from gepiii.features import FeatureMatrix
from gepiii.gbt import (
    CvEnsemble,
    GbtParams,
    PlanError,
    SubsetPlan,
    fit_cv_ensemble,
    fit_gbt,
    make_fold_plan,
    predict_gbt,
)
from gepiii.gbt.cv import FULL, GLOBAL
from gepiii.scoring import rmsle


def _matrix(n_buildings=2, meters=(0,), hours=None, seed=0):
    ts = hours if hours is not None else pd.date_range("2016-01-01", "2016-12-31 23:00", freq="6h")
    rng = np.random.default_rng(seed)
    parts = []
    for b in range(n_buildings):
        for m in meters:
            parts.append(pd.DataFrame({"building_id": b, "meter": m, "timestamp": ts, "site_id": 0,
                                       "primary_use": 0}))
    keys = pd.concat(parts, ignore_index=True)
    hour = keys["timestamp"].dt.hour.to_numpy(dtype=float)
    temp = np.cos(2 * np.pi * keys["timestamp"].dt.dayofyear.to_numpy() / 365.0) * 10
    X = np.column_stack([hour, temp, keys["building_id"], keys["meter"]]).astype(float)
    y = 2 + 0.1 * keys["building_id"] + 0.5 * keys["meter"] + 0.05 * hour + 0.03 * temp
    y = y.to_numpy() + rng.normal(0, 0.05, len(keys))
    return FeatureMatrix(keys, X, ["hour", "temp", "building_id", "meter"], ["numeric"] * 4, y)


def test_by_month_twelve_folds():
    mat = _matrix()
    plan = make_fold_plan(mat, "by_month", 12)
    months = mat.keys["timestamp"].dt.month.to_numpy()
    np.testing.assert_array_equal(plan.assignment, months - 1)
    for f in range(12):
        assert set(months[plan.valid_rows(f)]) == {f + 1}


def test_by_row_block_and_errors():
    mat = _matrix(n_buildings=1, hours=pd.date_range("2016-01-01", periods=5, freq="h"), meters=(0, 1))
    plan = make_fold_plan(mat, "by_row_block", 2)
    assert np.bincount(plan.assignment).tolist() == [5, 5]
    with pytest.raises(PlanError):
        make_fold_plan(_matrix(), "by_month", 13)
    with pytest.raises(PlanError):
        make_fold_plan(_matrix(), "by_week", 2)


PARAMS = GbtParams(n_trees=30, learning_rate=0.2, max_leaves=7, min_samples_leaf=10)


def test_subset_none_two_folds():
    mat = _matrix()
    plan = make_fold_plan(mat, "by_month", 2)
    ens = fit_cv_ensemble(mat, PARAMS, plan, SubsetPlan("none"))
    assert sorted(ens.models) == [(0, "all"), (1, "all")]
    assert ens.fallback == {}
    for f in (0, 1):
        rows = plan.valid_rows(f)
        # model (f, g) holds fold f out, so with k=2 it is trained on the other fold only
        other = fit_gbt((mat.X[plan.valid_rows(1 - f)], mat.target[plan.valid_rows(1 - f)]), PARAMS)
        np.testing.assert_array_equal(ens.oof[rows], predict_gbt(ens.models[(f, "all")], mat.X[rows]))
        np.testing.assert_array_equal(ens.oof[rows], predict_gbt(other, mat.X[rows]))


def test_subset_meter_model_count_and_fallback():
    mat = _matrix(meters=(0, 1))
    plan = make_fold_plan(mat, "by_month", 2)
    ens = fit_cv_ensemble(mat, PARAMS, plan, SubsetPlan("meter"))
    assert sorted(ens.models) == [(0, "0"), (0, "1"), (1, "0"), (1, "1")]
    assert set(ens.fallback) == {0, 1}
    # an unseen meter routes to the global model
    unseen = _matrix(meters=(3,))
    assert set(ens.subset_plan.route(unseen)) == {GLOBAL}
    assert np.isfinite(ens.predict(unseen)).all()


def test_small_groups_fall_back_with_warning():
    mat = _matrix(n_buildings=3)
    plan = make_fold_plan(mat, "by_month", 2)
    ens = fit_cv_ensemble(mat, PARAMS, plan, SubsetPlan("building_meter"), min_group_rows=10_000)
    assert ens.models == {}
    assert len(ens.warnings) == 3
    assert set(ens.subset_plan.route(mat)) == {GLOBAL}


def test_refit_full_and_persistence(tmp_path):
    mat = _matrix(meters=(0, 1))
    plan = make_fold_plan(mat, "by_month", 3)
    params = GbtParams(n_trees=200, learning_rate=0.3, max_leaves=7, min_samples_leaf=10,
                       early_stopping_rounds=5)
    ens = fit_cv_ensemble(mat, params, plan, SubsetPlan("meter"), refit_full=True)
    for g in ("0", "1"):
        best = [ens.models[(f, g)].best_iteration + 1 for f in range(3)]
        assert len(ens.models[(FULL, g)].trees) == int(round(np.mean(best)))
    ens.save(tmp_path / "ens")
    loaded = CvEnsemble.load(tmp_path / "ens")
    np.testing.assert_array_equal(loaded.predict(mat), ens.predict(mat))
    np.testing.assert_array_equal(loaded.oof, ens.oof)


def test_oof_beats_global_mean():
    mat = _matrix(n_buildings=4, meters=(0, 1), seed=3)
    plan = make_fold_plan(mat, "by_month", 4)
    ens = fit_cv_ensemble(mat, PARAMS, plan, SubsetPlan("building_meter"))
    actual = np.expm1(mat.target)
    naive = np.full(mat.n_rows, np.expm1(mat.target.mean()))
    assert rmsle(np.expm1(ens.oof), actual) < rmsle(naive, actual)


def test_linear_learner():
    mat = _matrix()
    plan = make_fold_plan(mat, "by_row_block", 2)
    ens = fit_cv_ensemble(mat, None, plan, SubsetPlan("none"), learner="linear")
    assert ens.params is None
    assert np.isfinite(ens.oof).all()
