"""Acceptance suite: one or more tests per criterion, summarised at the end of the run."""

import json
import math
import subprocess
import sys
import time

import numpy as np
import pandas as pd
import pytest

from conftest import cli_env
from gepiii.cli import main
from gepiii.dataset import (
    BUILDING_COLUMNS,
    READING_COLUMNS,
    TEST_COLUMNS,
    WEATHER_COLUMNS,
    load_training_bundle,
    read_weather,
)
from gepiii.ensemble import blend, optimize_weights
from gepiii.features import FeatureMatrix, default_folds, fit_target_encoder
from gepiii.gbt import GbtParams, fit_gbt, predict_gbt
from gepiii.preprocess import estimate_site_offsets, find_constant_streaks, find_site_wide_zeros
from gepiii.scoring import (
    SplitSpec,
    Submission,
    build_leaderboard,
    cv_rmse,
    enforce_submission_rules,
    final_submission,
    mbe,
    medal_counts,
    rmsle,
    score_submission,
)
from gepiii.synthetic import SyntheticSpec, generate_synthetic, manifest_defects
from oracles import exact_greedy_split, naive_rmsle

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# 1-3: metric layer


@criterion(1, "rmsle matches a naive oracle within 1e-12 on 1000 random vectors, < 10 s")
def test_metric_oracle_equivalence():
    rng = np.random.default_rng(2019)
    # log-uniform lengths cover both ends of 1..1e5 without a minutes-long oracle
    lengths = np.unique(np.r_[1, 100_000, np.round(10 ** rng.uniform(0, 5, 998))].astype(int))
    lengths = np.r_[lengths, rng.integers(1, 100_001, 1000 - len(lengths))]
    assert len(lengths) == 1000
    spent, worst = 0.0, 0.0
    for n in lengths:
        scale = 10 ** rng.uniform(0, 6)
        p = np.minimum(rng.exponential(scale, n), 1e6)
        a = rng.uniform(0, 1e6, n)
        a[rng.random(n) < 0.05] = 0.0
        t0 = time.perf_counter()
        got = rmsle(p, a)
        spent += time.perf_counter() - t0
        worst = max(worst, abs(got - naive_rmsle(p, a)))
    assert worst <= 1e-12
    assert spent < 10.0


@criterion(2, "analytic rmsle, cv_rmse and mbe cases exact to 1e-12")
def test_metric_analytic_cases():
    a = np.array([0.0, 3.5, 1e6])
    assert abs(rmsle(a, a)) <= 1e-12
    assert abs(rmsle([math.e - 1], [0.0]) - 1.0) <= 1e-12
    assert abs(rmsle([0.0, math.e ** 2 - 1], [math.e - 1, 0.0]) - math.sqrt(2.5)) <= 1e-12
    assert abs(cv_rmse([1.0, 3.0], [1.0, 3.0])) <= 1e-12 and abs(mbe([1.0, 3.0], [1.0, 3.0])) <= 1e-12
    assert abs(cv_rmse([2.0, 2.0], [1.0, 3.0]) - 50.0) <= 1e-12
    assert abs(mbe([0.0, 0.0], [1.0, 3.0]) - 100.0) <= 1e-12


@criterion(3, "private score ignores 2017 and excluded-site rows, reacts to every other 2018 row")
def test_split_exclusion_invariance():
    n = 5000
    rng = np.random.default_rng(3)
    hours = pd.date_range("2017-01-01", "2018-12-31 23:00", freq="h")
    rows = pd.DataFrame({
        "row_id": np.arange(n),
        "building_id": rng.integers(0, 50, n),
        "meter": rng.integers(0, 4, n),
        "timestamp": hours[np.sort(rng.integers(0, len(hours), n))],
        "site_id": rng.integers(0, 6, n),
    })
    split = SplitSpec(excluded_site_ids={0, 3})
    truth = rng.gamma(2.0, 50.0, n)
    pred = truth * np.exp(rng.normal(0, 0.3, n))
    base = score_submission(pred, truth, rows, split)
    private_rows = (rows["timestamp"].dt.year == 2018) & ~rows["site_id"].isin([0, 3])
    private_rows = private_rows.to_numpy()
    assert 0 < private_rows.sum() < n
    for i in range(n):
        moved = pred.copy()
        moved[i] = pred[i] * 3.0 + 7.0
        s = score_submission(moved, truth, rows, split)
        if private_rows[i]:
            assert s.private != base.private, i
        else:
            assert s.private == base.private, i


# ---------------------------------------------------------------------------
# 4: boosted trees


@criterion(4, "boosting: monotone loss, exact-greedy first split, step exact fit")
def test_gbt_loss_trace_500_iterations():
    rng = np.random.default_rng(40)
    X = rng.normal(size=(2000, 5))
    y = np.sin(2 * X[:, 0]) + X[:, 1] * X[:, 2] + 0.3 * X[:, 3] ** 2 + rng.normal(0, 0.2, 2000)
    model = fit_gbt((X, y), GbtParams(n_trees=500, learning_rate=0.1, max_leaves=15, min_samples_leaf=10))
    trace = model.loss_trace
    assert len(trace) >= 500
    assert all(b <= a for a, b in zip(trace, trace[1:]))


@criterion(4, "boosting: monotone loss, exact-greedy first split, step exact fit")
def test_gbt_first_split_50_instances():
    rng = np.random.default_rng(41)
    for _ in range(50):
        n, p = int(rng.integers(10, 257)), int(rng.integers(1, 6))
        X = rng.normal(size=(n, p))
        y = X[:, int(rng.integers(p))] * rng.normal(0, 2) + rng.normal(size=n)
        lam = float(rng.choice([0.0, 1.0, 5.0]))
        min_leaf = int(rng.integers(1, 6))
        params = GbtParams(n_trees=1, max_leaves=2, min_samples_leaf=min_leaf, n_bins=256,
                           l2_leaf_regularization=lam)
        model = fit_gbt((X, y), params)
        tree = model.trees[0]
        gain, feat, (lo, hi) = exact_greedy_split(X, y, model.base_score, lam, min_leaf=min_leaf)
        assert tree.feature[0] == feat
        assert abs(tree.gain[0] - gain) <= 1e-9
        assert lo <= model.threshold(feat, tree.bin[0]) < hi


@criterion(4, "boosting: monotone loss, exact-greedy first split, step exact fit")
def test_gbt_step_function():
    x = np.linspace(-1, 1, 200)
    x = x[x != 0].reshape(-1, 1)
    y = np.where(x[:, 0] < 0, 0.0, 10.0)
    params = GbtParams(n_trees=1, learning_rate=1.0, max_leaves=2, min_samples_leaf=1,
                       l2_leaf_regularization=0.0)
    model = fit_gbt((x, y), params)
    tree = model.trees[0]
    assert model.base_score == 5.0
    assert sorted(tree.value[tree.feature < 0].tolist()) == [-5.0, 5.0]
    np.testing.assert_array_equal(predict_gbt(model, x), y)


# ---------------------------------------------------------------------------
# 5 and 10: end-to-end


def _scores(work):
    return json.loads((work / "stages" / "score" / "scores.json").read_text())


@pytest.mark.slow
@criterion(5, "winner5 private score <= 0.70 x hour-of-week baseline and <= linear baseline, < 10 min")
def test_end_to_end_skill(winner5_run):
    scores = _scores(winner5_run["work"])
    ours = scores["submission"]["private_rmsle"]
    how = scores["baseline_hour_of_week"]["private_rmsle"]
    linear = scores["baseline_linear"]["private_rmsle"]
    print(f"private rmsle: submission {ours:.4f}, hour-of-week {how:.4f}, linear {linear:.4f}, "
          f"{winner5_run['seconds']:.0f} s")
    assert ours <= 0.70 * how
    assert ours <= linear
    assert winner5_run["seconds"] < 600


@pytest.mark.slow
@criterion(10, "run with 1 and 8 threads gives a byte-identical submission")
def test_thread_count_determinism(winner5_run, tmp_path):
    work = tmp_path / "threads8"
    proc = subprocess.run(
        [sys.executable, "-m", "gepiii", "run", "--config", "winner5", "--work-dir", str(work),
         "--threads", "8", "-q"],
        env=cli_env(8), capture_output=True, text=True, timeout=1800,
    )
    assert proc.returncode == 0, proc.stderr
    one = (winner5_run["work"] / "submission.csv").read_bytes()
    eight = (work / "submission.csv").read_bytes()
    assert one == eight


# ---------------------------------------------------------------------------
# 6: blending


@criterion(6, "optimized blend never scores worse than its best member (100 member sets)")
def test_ensemble_dominance():
    rng = np.random.default_rng(6)
    for trial in range(100):
        n = int(rng.integers(50, 1500))
        actual = rng.gamma(float(rng.uniform(0.5, 3)), float(rng.uniform(1, 200)), n)
        actual[rng.random(n) < 0.03] = 0.0
        members = {}
        for j in range(int(rng.integers(1, 6))):
            bias = rng.normal(0, 0.2)
            noise = rng.uniform(0.05, 1.0)
            members[f"m{j}"] = np.maximum(actual * np.exp(bias + rng.normal(0, noise, n)) +
                                          rng.normal(0, 1, n), 0.0)
        meters = rng.integers(0, 3, n) if trial % 4 == 0 else None
        spec = optimize_weights(members, actual, meters=meters, per_meter=meters is not None,
                                seed=trial)
        blended = blend(spec, np.vstack(list(members.values())), meters)
        best = min(rmsle(v, actual) for v in members.values())
        assert rmsle(blended, actual) <= best + 1e-12, trial


# ---------------------------------------------------------------------------
# 7: defect recovery


@criterion(7, "every injected streak, site-wide zero outage and timezone offset is recovered")
def test_streak_and_outage_recovery(small_data):
    out, manifest = small_data
    bundle = load_training_bundle(out)
    readings = bundle.readings
    streaks = manifest_defects(manifest, "constant_streak")
    outages = manifest_defects(manifest, "site_wide_zero")
    assert streaks and outages
    for d in streaks:
        assert d["hours"] >= 48
        series = readings[(readings["building_id"] == d["building_id"]) & (readings["meter"] == d["meter"])]
        series = series.sort_values("timestamp")
        ts = series["timestamp"]
        found = {(str(ts.iloc[iv.start]), str(ts.iloc[iv.end]))
                 for iv in find_constant_streaks(ts, series["meter_reading"], min_len=48)}
        assert (d["start"], d["end"]) in found, d
    intervals, mask = find_site_wide_zeros(readings, bundle.buildings, min_fraction=0.5, min_len=6)
    found = {(s, m, str(t0), str(t1)) for s, m, t0, t1 in intervals}
    expected = {(d["site_id"], d["meter"], d["start"], d["end"]) for d in outages}
    assert found == expected
    assert mask.sum() == sum(d["rows"] for d in outages)


@criterion(7, "every injected streak, site-wide zero outage and timezone offset is recovered")
def test_timezone_recovery(tmp_path):
    shifts = {site: site - 11 for site in range(24)}
    spec = SyntheticSpec(n_sites=24, buildings_per_site=1, seed=7, temperature_noise=0.5,
                         meter_probabilities={"chilledwater": 0.0, "steam": 0.0, "hotwater": 0.0},
                         timezone_shifts=shifts)
    manifest = generate_synthetic(spec, tmp_path)
    weather = pd.concat([read_weather(tmp_path / name)[0]
                         for name in ("weather_train.csv", "weather_test.csv")], ignore_index=True)
    truth = {site: 0 for site in range(24)}
    truth.update({d["site_id"]: d["correction_hours"] for d in manifest_defects(manifest, "timezone_shift")})
    assert sorted(truth.values()) == list(range(-12, 12))
    assert estimate_site_offsets(weather) == truth


# ---------------------------------------------------------------------------
# 8: leakage


def _encoding_matrix(n=6000, seed=8):
    rng = np.random.default_rng(seed)
    hours = pd.date_range("2016-01-01", "2016-12-31 23:00", freq="h")
    keys = pd.DataFrame({
        "building_id": rng.integers(0, 30, n),
        "meter": rng.integers(0, 4, n),
        "timestamp": hours[rng.integers(0, len(hours), n)],
    })
    X = keys[["building_id", "meter"]].to_numpy(dtype=float)
    y = rng.gamma(2.0, 1.0, n) + 0.1 * keys["building_id"].to_numpy()
    return FeatureMatrix(keys, X, ["building_id", "meter"], ["categorical"] * 2, y)


@criterion(8, "deleting a training row leaves its out-of-fold encoding unchanged (100 rows)")
def test_target_encoding_leakage_freedom():
    mat = _encoding_matrix()
    folds = default_folds(mat, 5)
    key = ("building_id", "meter")
    rng = np.random.default_rng(88)
    encoders = {kind: fit_target_encoder(mat, key, kind, m=5.0, n_folds=5, folds=folds)
                for kind in ("mean", "percentile_rank", "proportion_above_global_median")}
    for i in rng.choice(mat.n_rows, 100, replace=False):
        keep = np.delete(np.arange(mat.n_rows), i)
        reduced = mat.take(keep)
        for kind, full in encoders.items():
            refit = fit_target_encoder(reduced, key, kind, m=5.0, n_folds=5, folds=folds[keep])
            again = refit.encode_fold(mat.take([i]), int(folds[i]))[0]
            assert again == full.train_encoding[i], (i, kind)


# ---------------------------------------------------------------------------
# 9: competition rules


def _sub(team, when, private=None, final=False):
    return Submission(team, pd.Timestamp(when, tz="UTC"), None, final, None, private)


@criterion(9, "daily limit, final selection and medal counts")
def test_competition_rules():
    history = []
    for when in ("2019-10-01 01:00", "2019-10-01 23:00"):
        sub = _sub("t", when)
        assert enforce_submission_rules(history, sub).accepted
        history.append(sub)
    assert not enforce_submission_rules(history, _sub("t", "2019-10-01 23:30")).accepted
    assert enforce_submission_rules([_sub("t", "2019-10-01 23:59")], _sub("t", "2019-10-02 00:01")).accepted

    subs = [_sub("t", "2019-11-01", 1.40, True), _sub("t", "2019-11-02", 1.25, True),
            _sub("t", "2019-11-03", 1.10)]
    assert final_submission(subs).private == 1.25

    assert medal_counts(1000) == {"gold": 2, "silver": 50, "bronze": 100}
    assert medal_counts(3614)["gold"] == 8
    assert medal_counts(1)["gold"] == 1
    board = build_leaderboard([_sub(f"t{i:04d}", "2019-11-01", float(i)) for i in range(1000)]).entries
    medals = board["medal"].tolist()
    assert medals[:2] == ["gold"] * 2 and medals[2:50] == ["silver"] * 48
    assert medals[50:100] == ["bronze"] * 50 and set(medals[100:]) == {""}
    assert build_leaderboard([_sub("solo", "2019-11-01", 1.0)]).entries["medal"].tolist() == ["gold"]


# ---------------------------------------------------------------------------
# 11: real-data layout


KAGGLE_HEADERS = {
    "train.csv": ["building_id", "meter", "timestamp", "meter_reading"],
    "test.csv": ["row_id", "building_id", "meter", "timestamp"],
    "building_metadata.csv": ["site_id", "building_id", "primary_use", "square_feet", "year_built",
                              "floor_count"],
    "weather_train.csv": ["site_id", "timestamp", "air_temperature", "cloud_coverage", "dew_temperature",
                          "precip_depth_1_hr", "sea_level_pressure", "wind_direction", "wind_speed"],
}


@criterion(11, "competition file layout ingests with a rejects report and scores structurally")
def test_kaggle_layout(small_data, tmp_path, capsys):
    assert READING_COLUMNS == KAGGLE_HEADERS["train.csv"]
    assert TEST_COLUMNS == KAGGLE_HEADERS["test.csv"]
    assert BUILDING_COLUMNS == KAGGLE_HEADERS["building_metadata.csv"]
    assert WEATHER_COLUMNS == KAGGLE_HEADERS["weather_train.csv"]

    src, manifest = small_data
    data = tmp_path / "kaggle"
    data.mkdir()
    for name in ("train.csv", "test.csv", "weather_train.csv", "weather_test.csv"):
        (data / name).write_bytes((src / name).read_bytes())
    (data / "building_metadata.csv").write_bytes((src / "building_meta.csv").read_bytes())
    with open(data / "train.csv", "a") as fh:
        fh.write("0,7,2016-03-01 00:00:00,1.0\n")  # an invalid meter type
    work = tmp_path / "work"
    assert main(["ingest", "--config", "baseline", "--work-dir", str(work), "--data-dir", str(data)]) == 0
    report = json.loads((work / "stages" / "ingest" / "report.json").read_text())
    rejects = (work / "stages" / "ingest" / "rejects.jsonl").read_text().splitlines()
    n_train = next(r["rows"] for r in manifest if r.get("name") == "train.csv")
    # every data row is either kept or listed in the rejects report
    assert report["rows"]["readings"] == n_train
    assert report["rejects"]["train.csv"]["reject"] == 1 and len(rejects) == 1
    bad = json.loads(rejects[0])
    assert bad["line"] == n_train + 2 and "meter" in bad["reason"]

    # without ground truth, scoring validates the submission's structure only
    capsys.readouterr()
    assert main(["score", str(src / "ground_truth.csv"), "--data-dir", str(data)]) == 0
    assert "not scored" in capsys.readouterr().out
    short = tmp_path / "short.csv"
    pd.read_csv(src / "ground_truth.csv").iloc[:-1].to_csv(short, index=False)
    assert main(["score", str(short), "--data-dir", str(data)]) == 2
