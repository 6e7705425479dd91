import hashlib

import numpy as np
import pandas as pd
import pytest

from gepiii.dataset import (
    DatasetError,
    load_test_rows,
    load_training_bundle,
    read_readings,
    read_weather,
    write_training_bundle,
)
from gepiii.synthetic import (
    KBTU_TO_KWH,
    SpecError,
    SyntheticSpec,
    generate_synthetic,
    manifest_defects,
)

BUILDINGS = "site_id,building_id,primary_use,square_feet,year_built,floor_count\n0,0,Office,1000,,\n"
WEATHER = ("site_id,timestamp,air_temperature,cloud_coverage,dew_temperature,precip_depth_1_hr,"
           "sea_level_pressure,wind_direction,wind_speed\n")


def _bundle(tmp_path, train_body, weather_body=""):
    (tmp_path / "train.csv").write_text("building_id,meter,timestamp,meter_reading\n" + train_body)
    if not (tmp_path / "building_meta.csv").exists():
        (tmp_path / "building_meta.csv").write_text(BUILDINGS)
    (tmp_path / "weather_train.csv").write_text(WEATHER + weather_body)
    return load_training_bundle(tmp_path)


def test_single_reading(tmp_path):
    b = _bundle(tmp_path, "0,0,2016-01-01 00:00:00,12.5\n")
    assert len(b.readings) == 1
    row = b.readings.iloc[0]
    assert (row.building_id, row.meter, row.meter_reading) == (0, 0, 12.5)
    assert row.timestamp == pd.Timestamp("2016-01-01 00:00:00")
    assert b.rejects == []


def test_header_only(tmp_path):
    b = _bundle(tmp_path, "")
    assert b.readings.empty
    assert b.rejects == []


def test_bad_meter_is_rejected(tmp_path):
    b = _bundle(tmp_path, "0,0,2016-01-01 00:00:00,1\n0,7,2016-01-01 01:00:00,1\n")
    assert len(b.readings) == 1
    assert len(b.rejects) == 1
    assert "meter" in b.rejects[0].reason


def test_negative_and_unaligned_rows_rejected(tmp_path):
    b = _bundle(tmp_path, "0,0,2016-01-01 00:00:00,-1\n0,0,2016-01-01 01:30:00,1\n0,0,2016-01-01 02:00:00,3\n")
    assert b.readings["meter_reading"].tolist() == [3.0]
    assert len(b.rejects) == 2


def test_missing_file_and_unknown_column(tmp_path):
    with pytest.raises(DatasetError):
        load_training_bundle(tmp_path)
    (tmp_path / "train.csv").write_text("building_id,meter,timestamp,reading\n")
    (tmp_path / "building_meta.csv").write_text(BUILDINGS)
    (tmp_path / "weather_train.csv").write_text(WEATHER)
    with pytest.raises(DatasetError):
        load_training_bundle(tmp_path)


def test_dew_point_violation_is_flagged_not_dropped(tmp_path):
    path = tmp_path / "weather.csv"
    path.write_text(WEATHER + "0,2016-01-01 00:00:00,10,,14,,,,\n")
    frame, rejects = read_weather(path)
    assert len(frame) == 1
    assert rejects[0].severity == "flag"


def test_test_rows(tmp_path):
    path = tmp_path / "test.csv"
    head = "row_id,building_id,meter,timestamp\n"
    path.write_text(head + "2,0,0,2017-01-01 02:00:00\n0,0,0,2017-01-01 00:00:00\n1,0,0,2017-01-01 01:00:00\n")
    rows = load_test_rows(path)
    assert rows["row_id"].tolist() == [0, 1, 2]

    path.write_text(head + "0,0,0,2017-01-01 00:00:00\n2,0,0,2017-01-01 02:00:00\n")
    with pytest.raises(DatasetError, match="dense"):
        load_test_rows(path)

    path.write_text(head + "0,0,0,2016-06-01 00:00:00\n")
    with pytest.raises(DatasetError, match="outside"):
        load_test_rows(path)


def test_round_trip(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    # floats written in shortest round-trip form, the writer's canonical format
    (src / "building_meta.csv").write_text(BUILDINGS.replace("1000", "1000.0"))
    b = _bundle(src, "0,0,2016-01-01 00:00:00,12.5\n0,1,2016-01-01 00:00:00,0.1\n",
                "0,2016-01-01 00:00:00,2.5,4.0,-1.2,0.0,1013.1,90.0,3.1\n0,2016-01-01 01:00:00,,,,,,,\n")
    out = tmp_path / "out"
    write_training_bundle(b, out)
    for name in ("train.csv", "building_meta.csv", "weather_train.csv"):
        assert (out / name).read_bytes() == (src / name).read_bytes()


def _hashes(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_synthetic_determinism(tmp_path):
    spec = SyntheticSpec(n_sites=1, buildings_per_site=2, seed=7,
                         defect_rates={"constant_streak": 0.5, "missing_weather": 0.01})
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    assert _hashes(tmp_path / "a") == _hashes(tmp_path / "b")


def test_synthetic_without_defects_is_clean(tmp_path):
    manifest = generate_synthetic(SyntheticSpec(n_sites=2, buildings_per_site=2, seed=3), tmp_path)
    assert [r for r in manifest if r["record"] == "defect"] == []
    bundle = load_training_bundle(tmp_path)
    assert bundle.rejects == []
    test = load_test_rows(tmp_path / "test.csv")
    truth = pd.read_csv(tmp_path / "ground_truth.csv")
    assert len(truth) == len(test)


def test_synthetic_unit_misscaling(tmp_path):
    spec = SyntheticSpec(n_sites=1, buildings_per_site=1, seed=2, unit_misscale_sites=[0])
    manifest = generate_synthetic(spec, tmp_path / "bad")
    generate_synthetic(SyntheticSpec(n_sites=1, buildings_per_site=1, seed=2), tmp_path / "good")
    (rec,) = manifest_defects(manifest, "unit_misscaling")
    assert rec["site_id"] == 0 and rec["factor"] == pytest.approx(1 / KBTU_TO_KWH)
    bad, _ = read_readings(tmp_path / "bad" / "train.csv")
    good, _ = read_readings(tmp_path / "good" / "train.csv")
    elec = bad["meter"] == 0
    np.testing.assert_allclose(bad.loc[elec, "meter_reading"] * KBTU_TO_KWH,
                               good.loc[elec, "meter_reading"], rtol=1e-4, atol=1e-4)


def test_synthetic_rejects_bad_range():
    with pytest.raises(SpecError):
        SyntheticSpec(end="2017-12-31").validate()
