"""Competition data model and CSV ingestion.

Four file families are handled, with exactly these columns:

- ``train.csv``: building_id, meter, timestamp, meter_reading
- ``building_meta.csv``: site_id, building_id, primary_use, square_feet,
  year_built, floor_count
- ``weather_train.csv`` / ``weather_test.csv``: site_id, timestamp,
  air_temperature, cloud_coverage, dew_temperature, precip_depth_1_hr,
  sea_level_pressure, wind_direction, wind_speed
- ``test.csv``: row_id, building_id, meter, timestamp

Collections are held as pandas DataFrames. Missing numeric cells are empty
strings on disk and NaN / ``pd.NA`` in memory. Timestamps are naive
``datetime64[ns]`` values in whatever clock the file uses; no timezone
handling happens at ingestion time.

Row-level defects never abort a load. Offending rows are dropped and recorded
as :class:`Reject` entries, which can be written as a JSON-lines report.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

READING_COLUMNS = ["building_id", "meter", "timestamp", "meter_reading"]
BUILDING_COLUMNS = [
    "site_id",
    "building_id",
    "primary_use",
    "square_feet",
    "year_built",
    "floor_count",
]
WEATHER_VARIABLES = [
    "air_temperature",
    "cloud_coverage",
    "dew_temperature",
    "precip_depth_1_hr",
    "sea_level_pressure",
    "wind_direction",
    "wind_speed",
]
WEATHER_COLUMNS = ["site_id", "timestamp", *WEATHER_VARIABLES]
TEST_COLUMNS = ["row_id", "building_id", "meter", "timestamp"]
SUBMISSION_COLUMNS = ["row_id", "meter_reading"]

# Kaggle ships the metadata as building_metadata.csv; both names are accepted.
BUILDING_FILE_NAMES = ("building_meta.csv", "building_metadata.csv")

TEST_START = pd.Timestamp("2017-01-01 00:00:00")
TEST_END = pd.Timestamp("2018-12-31 23:00:00")

# Slack for sensor noise when checking dew point against air temperature.
DEW_POINT_SLACK = 3.0


class MeterType(IntEnum):
    ELECTRICITY = 0
    CHILLEDWATER = 1
    STEAM = 2
    HOTWATER = 3


class DatasetError(Exception):
    """Fatal ingestion problem: missing file, bad header, misaligned test rows."""


@dataclass
class Reject:
    """One dropped (or flagged) input row."""

    file: str
    line: int
    reason: str
    row: dict = field(default_factory=dict)
    severity: str = "reject"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=str)


@dataclass
class TrainingBundle:
    readings: pd.DataFrame
    buildings: pd.DataFrame
    weather: pd.DataFrame
    rejects: list[Reject] = field(default_factory=list)


# ---------------------------------------------------------------------------
# column coercion


def _check_header(path: Path, expected: list[str]) -> None:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise DatasetError(f"{path}: file is empty (no header)")
    unknown = [c for c in header if c not in expected]
    if unknown:
        raise DatasetError(f"{path}: unknown column(s) {unknown}; expected {expected}")
    missing = [c for c in expected if c not in header]
    if missing:
        raise DatasetError(f"{path}: missing column(s) {missing}")
    if len(set(header)) != len(header):
        raise DatasetError(f"{path}: duplicate column names in header")


def _read_raw(path: Path, numeric: tuple[str, ...] = ()) -> pd.DataFrame:
    """Read cells as text, except ``numeric`` columns as float64 when they parse.

    The typed attempt keeps memory flat on the 20M-row Kaggle file; any
    unparseable cell falls back to an all-text read so the row can be reported.
    """
    if numeric:
        header = pd.read_csv(path, nrows=0, encoding="utf-8").columns
        dtypes = {c: ("float64" if c in numeric else "string[pyarrow]") for c in header}
        try:
            return pd.read_csv(
                path,
                dtype=dtypes,
                keep_default_na=False,
                na_values={c: [""] for c in numeric},
                float_precision="round_trip",
                encoding="utf-8",
            )
        except (ValueError, TypeError):
            logger.info("%s: typed read failed, re-reading as text", path.name)
    return pd.read_csv(
        path,
        dtype=str,
        keep_default_na=False,
        na_filter=False,
        encoding="utf-8",
    )


def _to_float(text: pd.Series) -> pd.Series:
    out = np.full(len(text), np.nan)
    for i, cell in enumerate(text.to_numpy()):
        if cell:
            try:
                out[i] = float(cell)
            except ValueError:
                pass
    return pd.Series(out, index=text.index)


class _Validator:
    """Accumulates per-row failure reasons while coercing columns."""

    def __init__(self, raw: pd.DataFrame, file: str):
        self.raw = raw
        self.file = file
        self.reasons = pd.Series("", index=raw.index, dtype=object)
        self.flags: list[Reject] = []

    def fail(self, mask, reason: str) -> None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return
        fresh = mask & (self.reasons.to_numpy() == "")
        self.reasons[fresh] = reason

    def flag(self, mask, reason: str) -> None:
        mask = np.asarray(mask, dtype=bool) & (self.reasons.to_numpy() == "")
        for idx in np.flatnonzero(mask):
            self.flags.append(
                Reject(self.file, int(idx) + 2, reason, self.raw.iloc[idx].to_dict(), "flag")
            )

    def _parse(self, col: str) -> tuple[pd.Series, pd.Series]:
        column = self.raw[col]
        if pd.api.types.is_numeric_dtype(column):
            values = column.astype(float)
            return values, values.isna()
        text = column.astype(str).str.strip()
        empty = text == ""
        return _to_float(text), empty

    def integer(self, col: str, *, optional: bool = False, minimum: int | None = 0):
        values, empty = self._parse(col)
        bad_number = (~empty) & (values.isna() | (values != np.floor(values)))
        self.fail(bad_number, f"{col}: not an integer")
        if not optional:
            self.fail(empty, f"{col}: missing value")
        if minimum is not None:
            self.fail(values < minimum, f"{col}: below {minimum}")
        return values

    def real(self, col: str, *, optional: bool = True, lo=None, hi=None):
        values, empty = self._parse(col)
        self.fail((~empty) & values.isna(), f"{col}: not a number")
        self.fail((~empty) & np.isinf(values.to_numpy()), f"{col}: not finite")
        if not optional:
            self.fail(empty, f"{col}: missing value")
        if lo is not None:
            self.fail(values < lo, f"{col}: below {lo}")
        if hi is not None:
            self.fail(values > hi, f"{col}: above {hi}")
        return values

    def meter(self, col: str = "meter"):
        values = self.integer(col)
        self.fail(
            values.notna() & ~values.isin([int(m) for m in MeterType]),
            f"{col}: not a MeterType code (0-3)",
        )
        return values

    def timestamp(self, col: str = "timestamp"):
        text = self.raw[col].astype(str).str.strip()
        values = pd.to_datetime(text, format=TIMESTAMP_FORMAT, errors="coerce")
        self.fail(values.isna(), f"{col}: not a '{TIMESTAMP_FORMAT}' timestamp")
        off_hour = values.notna() & ((values.dt.minute != 0) | (values.dt.second != 0))
        self.fail(off_hour, f"{col}: not aligned to the hour")
        return values

    def duplicates(self, frame: pd.DataFrame, key: list[str]) -> None:
        ok = (self.reasons == "").to_numpy()
        dup = np.zeros(len(frame), dtype=bool)
        dup[ok] = frame.loc[ok, key].duplicated(keep="first").to_numpy()
        self.fail(dup, f"duplicate key {tuple(key)}")

    def finish(self, frame: pd.DataFrame) -> tuple[pd.DataFrame, list[Reject]]:
        bad = (self.reasons != "").to_numpy()
        rejects = [
            Reject(self.file, int(i) + 2, self.reasons.iat[i], self.raw.iloc[i].to_dict())
            for i in np.flatnonzero(bad)
        ]
        rejects.extend(self.flags)
        rejects.sort(key=lambda r: (r.line, r.severity))
        return frame.loc[~bad].reset_index(drop=True), rejects


# ---------------------------------------------------------------------------
# per-file readers


def read_readings(path) -> tuple[pd.DataFrame, list[Reject]]:
    path = Path(path)
    _check_header(path, READING_COLUMNS)
    raw = _read_raw(path, ("building_id", "meter", "meter_reading"))
    v = _Validator(raw, path.name)
    frame = pd.DataFrame(
        {
            "building_id": v.integer("building_id"),
            "meter": v.meter(),
            "timestamp": v.timestamp(),
            "meter_reading": v.real("meter_reading", optional=False, lo=0.0),
        }
    )
    v.duplicates(frame, ["building_id", "meter", "timestamp"])
    frame, rejects = v.finish(frame)
    frame = frame.astype({"building_id": np.int64, "meter": np.int8})
    frame = frame.sort_values(["building_id", "meter", "timestamp"], kind="stable")
    return frame.reset_index(drop=True), rejects


def read_buildings(path) -> tuple[pd.DataFrame, list[Reject]]:
    path = Path(path)
    _check_header(path, BUILDING_COLUMNS)
    raw = _read_raw(path, ("site_id", "building_id", "square_feet", "year_built", "floor_count"))
    v = _Validator(raw, path.name)
    use = raw["primary_use"].astype(str).str.strip()
    v.fail(use == "", "primary_use: missing value")
    sqft = v.real("square_feet")
    v.fail(sqft.notna() & (sqft <= 0), "square_feet: must be > 0")
    frame = pd.DataFrame(
        {
            "site_id": v.integer("site_id"),
            "building_id": v.integer("building_id"),
            "primary_use": use,
            "square_feet": sqft,
            "year_built": v.integer("year_built", optional=True, minimum=None),
            "floor_count": v.integer("floor_count", optional=True, minimum=0),
        }
    )
    v.duplicates(frame, ["building_id"])
    frame, rejects = v.finish(frame)
    frame = frame.astype(
        {
            "site_id": np.int64,
            "building_id": np.int64,
            "year_built": "Int64",
            "floor_count": "Int64",
        }
    )
    return frame.sort_values("building_id", kind="stable").reset_index(drop=True), rejects


def read_weather(path) -> tuple[pd.DataFrame, list[Reject]]:
    path = Path(path)
    _check_header(path, WEATHER_COLUMNS)
    raw = _read_raw(path, ("site_id", *WEATHER_VARIABLES))
    v = _Validator(raw, path.name)
    frame = pd.DataFrame(
        {
            "site_id": v.integer("site_id"),
            "timestamp": v.timestamp(),
            "air_temperature": v.real("air_temperature"),
            "cloud_coverage": v.real("cloud_coverage", lo=0.0, hi=9.0),
            "dew_temperature": v.real("dew_temperature"),
            "precip_depth_1_hr": v.real("precip_depth_1_hr", lo=-1.0),
            "sea_level_pressure": v.real("sea_level_pressure"),
            "wind_direction": v.real("wind_direction", lo=0.0, hi=360.0),
            "wind_speed": v.real("wind_speed", lo=0.0),
        }
    )
    v.duplicates(frame, ["site_id", "timestamp"])
    v.flag(
        frame["dew_temperature"] > frame["air_temperature"] + DEW_POINT_SLACK,
        "dew_temperature exceeds air_temperature + 3.0",
    )
    frame, rejects = v.finish(frame)
    frame = frame.astype({"site_id": np.int64})
    frame = frame.sort_values(["site_id", "timestamp"], kind="stable")
    return frame.reset_index(drop=True), rejects


def load_training_bundle(dir_path) -> TrainingBundle:
    """Read train.csv, building metadata and weather_train.csv from ``dir_path``.

    Raises :class:`DatasetError` for a missing file or a header that does not
    match the expected columns. Malformed rows are dropped and reported.
    """
    root = Path(dir_path)
    train = root / "train.csv"
    weather = root / "weather_train.csv"
    meta = next((root / n for n in BUILDING_FILE_NAMES if (root / n).exists()), None)
    for p in (train, weather):
        if not p.exists():
            raise DatasetError(f"missing required file {p}")
    if meta is None:
        raise DatasetError(f"missing required file {root / BUILDING_FILE_NAMES[0]}")

    readings, r1 = read_readings(train)
    buildings, r2 = read_buildings(meta)
    weather_frame, r3 = read_weather(weather)
    rejects = r1 + r2 + r3

    # A reading for an unknown building cannot be joined to a site.
    orphan = ~readings["building_id"].isin(buildings["building_id"])
    if orphan.any():
        logger.warning("%d readings reference unknown buildings", int(orphan.sum()))
        for idx in np.flatnonzero(orphan.to_numpy())[:1000]:
            rejects.append(
                Reject(train.name, -1, "building_id: not in building metadata",
                       _row_dict(readings.iloc[idx]))
            )
        readings = readings.loc[~orphan].reset_index(drop=True)
    if rejects:
        logger.info("ingestion dropped or flagged %d rows", len(rejects))
    return TrainingBundle(readings, buildings, weather_frame, rejects)


def load_test_rows(path) -> pd.DataFrame:
    """Read test.csv. Any defect is fatal because submissions align on row_id."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing required file {path}")
    _check_header(path, TEST_COLUMNS)
    raw = _read_raw(path, ("row_id", "building_id", "meter"))
    v = _Validator(raw, path.name)
    frame = pd.DataFrame(
        {
            "row_id": v.integer("row_id"),
            "building_id": v.integer("building_id"),
            "meter": v.meter(),
            "timestamp": v.timestamp(),
        }
    )
    bad = v.reasons != ""
    if bad.any():
        first = int(np.flatnonzero(bad.to_numpy())[0])
        raise DatasetError(f"{path.name} line {first + 2}: {v.reasons.iat[first]}")
    frame = frame.astype({"row_id": np.int64, "building_id": np.int64, "meter": np.int8})
    frame = frame.sort_values("row_id", kind="stable").reset_index(drop=True)
    ids = frame["row_id"].to_numpy()
    if len(ids) and not np.array_equal(ids, np.arange(len(ids))):
        dup = np.flatnonzero(np.diff(ids) == 0)
        if dup.size:
            raise DatasetError(f"{path.name}: duplicate row_id {ids[dup[0]]}")
        gap = np.flatnonzero(ids != np.arange(len(ids)))[0]
        raise DatasetError(f"{path.name}: row_id not dense; expected {gap}, found {ids[gap]}")
    ts = frame["timestamp"]
    out = (ts < TEST_START) | (ts > TEST_END)
    if out.any():
        i = int(np.flatnonzero(out.to_numpy())[0])
        raise DatasetError(
            f"{path.name}: row_id {ids[i]} timestamp {ts.iat[i]} outside 2017-01-01..2018-12-31"
        )
    return frame


def load_submission(path, n_rows: int | None = None) -> pd.DataFrame:
    """Read a ``row_id,meter_reading`` file, re-sorted by row_id.

    Structural checks only; alignment against test rows is the scorer's job.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing submission file {path}")
    _check_header(path, SUBMISSION_COLUMNS)
    raw = _read_raw(path, ("row_id", "meter_reading"))
    v = _Validator(raw, path.name)
    frame = pd.DataFrame(
        {
            "row_id": v.integer("row_id"),
            "meter_reading": v.real("meter_reading", optional=False),
        }
    )
    frame["_line"] = np.arange(len(frame)) + 2
    frame["_reason"] = v.reasons.to_numpy()
    return frame.sort_values("row_id", kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------------------
# writers


def _row_dict(row: pd.Series) -> dict:
    return {k: (None if pd.isna(v) else v) for k, v in row.items()}


def write_table(frame: pd.DataFrame, path, columns: list[str]) -> None:
    """Write ``frame[columns]`` as UTF-8 CSV.

    Floats use the shortest round-trip decimal repr, missing cells are empty,
    timestamps use ``YYYY-MM-DD HH:MM:SS``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[columns].to_csv(
        path,
        index=False,
        na_rep="",
        date_format=TIMESTAMP_FORMAT,
        lineterminator="\n",
        encoding="utf-8",
    )


def write_training_bundle(bundle: TrainingBundle, dir_path) -> None:
    root = Path(dir_path)
    write_table(bundle.readings, root / "train.csv", READING_COLUMNS)
    write_table(bundle.buildings, root / "building_meta.csv", BUILDING_COLUMNS)
    write_table(bundle.weather, root / "weather_train.csv", WEATHER_COLUMNS)


def write_rejects(rejects: list[Reject], path) -> None:
    """JSON lines: file, line (1-based, header is line 1; -1 for join rejects),
    reason, row (raw cell values), severity ("reject" or "flag")."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(r.to_json() + "\n")


def write_submission(row_ids, predictions, path) -> None:
    frame = pd.DataFrame(
        {"row_id": np.asarray(row_ids, dtype=np.int64),
         "meter_reading": np.asarray(predictions, dtype=float)}
    )
    write_table(frame.sort_values("row_id"), path, SUBMISSION_COLUMNS)
