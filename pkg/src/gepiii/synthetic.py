"""Deterministic synthetic competition datasets.

The generator writes the same file set the competition shipped (2016 training
year, 2017-2018 test years) plus ``ground_truth.csv`` for the test rows and a
JSON-lines ``manifest.jsonl`` describing buildings, files and every injected
defect. Identical :class:`SyntheticSpec` values give byte-identical files.

Signal model, per (building, meter), in local clock time::

    reading = base(area, building) * load(occupancy, smoothed temperature) * noise

``occupancy`` depends on hour, weekday, holiday and primary use. The load
term is a degree-hour response: cooling for electricity and chilled water,
heating for steam and hot water. Noise is multiplicative log-normal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from pandas.tseries.holiday import USFederalHolidayCalendar

from .dataset import (
    BUILDING_COLUMNS,
    READING_COLUMNS,
    TEST_COLUMNS,
    WEATHER_COLUMNS,
    MeterType,
    write_table,
)

# kWh per kBTU; misscaled readings are stored in kBTU.
KBTU_TO_KWH = 0.293071

SYNTH_START = pd.Timestamp("2016-01-01 00:00:00")
SYNTH_END = pd.Timestamp("2018-12-31 23:00:00")
TRAIN_END = pd.Timestamp("2016-12-31 23:00:00")

PRIMARY_USES = [
    "Education",
    "Office",
    "Lodging/residential",
    "Entertainment/public assembly",
    "Public services",
    "Healthcare",
]

DEFECT_KINDS = (
    "constant_streak",
    "missing_weather",
    "site_wide_zero",
    "unit_misscaling",
    "timezone_shift",
)


class SpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n_sites: int = 2
    buildings_per_site: int = 3
    # electricity is always present; other meter types are drawn per building
    meter_probabilities: dict = field(
        default_factory=lambda: {"chilledwater": 0.5, "steam": 0.3, "hotwater": 0.3}
    )
    start: str = "2016-01-01"
    end: str = "2018-12-31"
    seed: int = 0
    noise_sigma: float = 0.08
    temperature_noise: float = 0.5
    defect_rates: dict = field(default_factory=dict)
    # explicit overrides, applied on top of the random draws
    unit_misscale_sites: list = field(default_factory=list)
    timezone_shifts: dict = field(default_factory=dict)

    def __post_init__(self):
        rates = {k: 0.0 for k in DEFECT_KINDS}
        unknown = set(self.defect_rates) - set(DEFECT_KINDS)
        if unknown:
            raise SpecError(f"unknown defect kinds {sorted(unknown)}")
        rates.update({k: float(v) for k, v in self.defect_rates.items()})
        self.defect_rates = rates
        self.timezone_shifts = {int(k): int(v) for k, v in self.timezone_shifts.items()}
        self.unit_misscale_sites = [int(s) for s in self.unit_misscale_sites]

    def validate(self) -> None:
        if self.n_sites < 1 or self.buildings_per_site < 1:
            raise SpecError("n_sites and buildings_per_site must be >= 1")
        if pd.Timestamp(self.start) != SYNTH_START.normalize() or pd.Timestamp(
            self.end
        ) != SYNTH_END.normalize():
            raise SpecError(
                "date range must be 2016-01-01..2018-12-31 "
                "(one training year followed by two test years)"
            )
        for kind, rate in self.defect_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise SpecError(f"defect rate {kind}={rate} outside [0, 1]")
        for site, shift in self.timezone_shifts.items():
            if not -11 <= shift <= 12:
                raise SpecError(f"timezone shift {shift} for site {site} outside [-11, 12]")
        if not 0 <= self.seed < 2**64:
            raise SpecError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown synthetic spec fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        data.pop("schema_version", None)
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# weather


def _ar1(rng, n, phi, sd):
    """Stationary AR(1) series with marginal standard deviation ``sd``."""
    eps = rng.normal(0.0, sd * np.sqrt(1.0 - phi**2), n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, sd)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def _site_weather(rng, hours: pd.DatetimeIndex, temperature_noise: float) -> pd.DataFrame:
    """True local weather on ``hours``; the diurnal peak is at 14:00."""
    n = len(hours)
    t_days = (hours - SYNTH_START).total_seconds().to_numpy() / 86400.0
    hod = hours.hour.to_numpy()
    mean_temp = rng.uniform(6.0, 20.0)
    seasonal_amp = rng.uniform(8.0, 14.0)
    diurnal_amp = rng.uniform(3.0, 6.0)
    seasonal = mean_temp - seasonal_amp * np.cos(2 * np.pi * (t_days - 15.0) / 365.25)
    diurnal = diurnal_amp * np.cos(2 * np.pi * (hod - 14) / 24.0)
    anomaly = _ar1(rng, n, 0.985, 3.0)
    air = seasonal + diurnal + anomaly + rng.normal(0.0, temperature_noise, n)
    spread = np.clip(
        rng.uniform(2.0, 6.0) + 0.6 * diurnal_amp * (1 + np.cos(2 * np.pi * (hod - 14) / 24.0))
        + _ar1(rng, n, 0.95, 1.5),
        0.2,
        None,
    )
    dew = air - spread
    cloud = np.clip(np.round(4.5 + _ar1(rng, n, 0.97, 3.0)), 0, 9)
    rain_on = _ar1(rng, n, 0.9, 1.0) > 1.3
    precip = np.where(rain_on, np.round(rng.gamma(1.5, 1.5, n)), 0.0)
    pressure = 1015.0 + _ar1(rng, n, 0.99, 7.0)
    wind = np.clip(rng.gamma(2.0, 1.8, n) + _ar1(rng, n, 0.95, 1.0), 0.0, None)
    direction = np.mod(np.round(rng.uniform(0, 36, n)) * 10.0, 360.0)
    return pd.DataFrame(
        {
            "air_temperature": np.round(air, 1),
            "cloud_coverage": cloud,
            "dew_temperature": np.round(dew, 1),
            "precip_depth_1_hr": precip,
            "sea_level_pressure": np.round(pressure, 1),
            "wind_direction": direction,
            "wind_speed": np.round(wind, 1),
        },
        index=hours,
    )


# ---------------------------------------------------------------------------
# meters


def _occupancy(use: str, hod: np.ndarray, weekday: np.ndarray, holiday: np.ndarray) -> np.ndarray:
    workday = (weekday < 5) & ~holiday
    if use in ("Education", "Office", "Public services"):
        day = np.clip(np.minimum(hod - 6, 19 - hod) / 2.0, 0.0, 1.0)
        return np.where(workday, day, 0.08 * day)
    if use == "Entertainment/public assembly":
        evening = np.clip(np.minimum(hod - 10, 23 - hod) / 3.0, 0.0, 1.0)
        return np.where(weekday >= 4, evening, 0.6 * evening)
    if use == "Lodging/residential":
        home = 0.6 + 0.4 * np.cos(2 * np.pi * (hod - 20) / 24.0)
        return np.where(workday, 0.8 * home, home)
    # Healthcare: around-the-clock with a weekday daytime bump
    return 0.7 + 0.3 * np.where(workday, np.clip(np.minimum(hod - 7, 18 - hod) / 2, 0, 1), 0)


def _smoothed(temp: np.ndarray, alpha: float) -> np.ndarray:
    out = np.empty_like(temp)
    acc = temp[0]
    for i, v in enumerate(temp):
        acc = alpha * v + (1.0 - alpha) * acc
        out[i] = acc
    return out


def _meter_signal(meter: int, scale: float, occ: np.ndarray, temp_eff: np.ndarray, coef: float):
    cool = np.maximum(temp_eff - 18.0, 0.0) / 10.0
    if meter == MeterType.ELECTRICITY:
        heat = np.maximum(8.0 - temp_eff, 0.0) / 20.0
        return scale * (0.35 + 0.65 * occ) * (1.0 + coef * cool + 0.3 * coef * heat)
    if meter == MeterType.CHILLEDWATER:
        chill = np.maximum(temp_eff - 12.0, 0.0) / 10.0
        return scale * (0.08 + coef * chill * (0.6 + 0.4 * occ))
    heat = np.maximum(16.0 - temp_eff, 0.0) / 10.0
    domestic = 0.25 if meter == MeterType.HOTWATER else 0.05
    return scale * (0.06 + domestic * occ + coef * heat * (0.7 + 0.3 * occ))


_METER_SCALE = {0: 60.0, 1: 180.0, 2: 220.0, 3: 120.0}
_METER_NAMES = {"chilledwater": 1, "steam": 2, "hotwater": 3}


def us_federal_holidays(start=SYNTH_START, end=SYNTH_END) -> pd.DatetimeIndex:
    return USFederalHolidayCalendar().holidays(start=start.normalize(), end=end.normalize())


def write_holiday_calendar(dates, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# one holiday date per line (YYYY-MM-DD)\n")
        for d in sorted(pd.DatetimeIndex(dates)):
            fh.write(d.strftime("%Y-%m-%d") + "\n")


# ---------------------------------------------------------------------------
# defects


def _pick_interval(rng, n_hours, length, busy: list[tuple[int, int]], margin=2, tries=200):
    """Random [start, start+length) inside [0, n_hours) avoiding ``busy`` +/- margin."""
    for _ in range(tries):
        start = int(rng.integers(margin, n_hours - length - margin))
        end = start + length
        if all(end + margin <= s or start >= e + margin for s, e in busy):
            return start, end
    return None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[dict]:
    """Write a synthetic competition dataset into ``out_dir``.

    Returns the manifest records (also written to ``manifest.jsonl``).
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rates = spec.defect_rates

    hours = pd.date_range(SYNTH_START, SYNTH_END, freq="h")
    n_hours = len(hours)
    n_train = int((hours <= TRAIN_END).sum())
    hod = hours.hour.to_numpy()
    weekday = hours.weekday.to_numpy()
    holidays = us_federal_holidays()
    is_holiday = hours.normalize().isin(holidays)
    # padding so shifted weather files can be cut from the true series
    pad = 24
    padded = pd.date_range(SYNTH_START - pd.Timedelta(hours=pad),
                           SYNTH_END + pd.Timedelta(hours=pad), freq="h")

    manifest: list[dict] = [
        {"record": "spec", **{k: v for k, v in asdict(spec).items()}},
    ]
    defects: list[dict] = []
    weather_frames = []
    building_rows = []
    reading_blocks = []  # (building_id, meter, clean values, observed train values)

    building_id = 0
    for site in range(spec.n_sites):
        site_rng = np.random.default_rng([spec.seed, 1, site])
        true_weather = _site_weather(site_rng, padded, spec.temperature_noise)

        shift = spec.timezone_shifts.get(site)
        if shift is None and site_rng.random() < rates["timezone_shift"]:
            shift = int(site_rng.choice([s for s in range(-11, 13) if s != 0]))
        shift = int(shift or 0)
        # value written at file time t is the true weather at local time t - shift
        file_weather = true_weather.reindex(hours - pd.Timedelta(hours=shift))
        file_weather.index = hours
        if shift:
            defects.append({"record": "defect", "kind": "timezone_shift", "site_id": site,
                            "shift_hours": shift, "correction_hours": -shift})

        # missing weather: isolated blank cells, dropped rows, one long gap
        rate = rates["missing_weather"]
        present = np.ones(n_hours, dtype=bool)
        n_blank = 0
        if rate > 0:
            values = file_weather.to_numpy(copy=True)
            blank = site_rng.random(values.shape) < rate
            values[blank] = np.nan
            n_blank = int(blank.sum())
            file_weather = pd.DataFrame(values, index=hours, columns=file_weather.columns)
            present &= site_rng.random(n_hours) >= rate
            if site_rng.random() < min(1.0, 20 * rate):
                length = int(site_rng.integers(24, 241))
                start = int(site_rng.integers(0, n_hours - length))
                present[start:start + length] = False
                defects.append({
                    "record": "defect", "kind": "missing_weather_gap", "site_id": site,
                    "start": str(hours[start]), "end": str(hours[start + length - 1]),
                    "hours": length,
                })
            defects.append({"record": "defect", "kind": "missing_weather", "site_id": site,
                            "blank_cells": n_blank, "missing_rows": int((~present).sum())})
        w = file_weather.loc[present].copy()
        w.insert(0, "timestamp", w.index)
        w.insert(0, "site_id", site)
        weather_frames.append(w.reset_index(drop=True))

        local = true_weather.reindex(hours)
        temp_eff = _smoothed(local["air_temperature"].to_numpy(), alpha=0.08)

        misscaled = site in spec.unit_misscale_sites or (
            site_rng.random() < rates["unit_misscaling"]
        )
        if misscaled:
            defects.append({"record": "defect", "kind": "unit_misscaling", "site_id": site,
                            "meter": 0, "factor": 1.0 / KBTU_TO_KWH, "correction": KBTU_TO_KWH})

        for _ in range(spec.buildings_per_site):
            b_rng = np.random.default_rng([spec.seed, 2, building_id])
            use = PRIMARY_USES[int(b_rng.integers(len(PRIMARY_USES)))]
            sqft = float(np.round(np.exp(b_rng.normal(np.log(60000), 0.8))))
            year = int(b_rng.integers(1950, 2016)) if b_rng.random() < 0.6 else None
            floors = int(b_rng.integers(1, 12)) if b_rng.random() < 0.4 else None
            building_rows.append({
                "site_id": site, "building_id": building_id, "primary_use": use,
                "square_feet": sqft, "year_built": year, "floor_count": floors,
            })
            meters = [0] + [
                code for name, code in sorted(_METER_NAMES.items(), key=lambda kv: kv[1])
                if b_rng.random() < spec.meter_probabilities.get(name, 0.0)
            ]
            manifest.append({"record": "building", "building_id": building_id,
                             "site_id": site, "primary_use": use, "meters": meters})
            occ = _occupancy(use, hod, weekday, is_holiday)
            area = (sqft / 10000.0) ** 0.9 * np.exp(b_rng.normal(0.0, 0.3))
            for meter in meters:
                coef = b_rng.uniform(0.6, 1.6)
                clean = _meter_signal(meter, _METER_SCALE[meter] * area, occ, temp_eff, coef)
                clean = clean * np.exp(b_rng.normal(0.0, spec.noise_sigma, n_hours))
                clean = np.round(clean, 4)
                observed = clean[:n_train].copy()
                if misscaled and meter == 0:
                    observed = np.round(observed / KBTU_TO_KWH, 4)
                reading_blocks.append([building_id, meter, clean, observed, site])
            building_id += 1

    # site-wide outages, then constant streaks avoiding them
    busy: dict[tuple[int, int], list[tuple[int, int]]] = {}
    by_site_meter: dict[tuple[int, int], list[int]] = {}
    for i, (_, meter, _, _, site) in enumerate(reading_blocks):
        by_site_meter.setdefault((site, meter), []).append(i)
    d_rng = np.random.default_rng([spec.seed, 3])
    for (site, meter), idx in sorted(by_site_meter.items()):
        if len(idx) < 2 or d_rng.random() >= rates["site_wide_zero"]:
            continue
        length = int(d_rng.integers(24, 97))
        start, end = _pick_interval(d_rng, n_train, length, [])
        for i in idx:
            reading_blocks[i][3][start:end] = 0.0
            busy.setdefault((reading_blocks[i][0], meter), []).append((start, end))
        defects.append({
            "record": "defect", "kind": "site_wide_zero", "site_id": site, "meter": meter,
            "start": str(hours[start]), "end": str(hours[end - 1]), "hours": length,
            "rows": length * len(idx),
        })
    for block in reading_blocks:
        b, meter, _, observed, _ = block
        if d_rng.random() >= rates["constant_streak"]:
            continue
        length = int(d_rng.integers(48, 169))
        picked = _pick_interval(d_rng, n_train, length, busy.get((b, meter), []))
        if picked is None:
            continue
        start, end = picked
        observed[start:end] = observed[start]
        defects.append({
            "record": "defect", "kind": "constant_streak", "building_id": b, "meter": meter,
            "start": str(hours[start]), "end": str(hours[end - 1]), "hours": length,
            "value": float(observed[start]),
        })

    # assemble files
    train_parts, test_parts = [], []
    for b, meter, clean, observed, _ in reading_blocks:
        train_parts.append(pd.DataFrame({
            "building_id": b, "meter": meter, "timestamp": hours[:n_train],
            "meter_reading": observed,
        }))
        test_parts.append(pd.DataFrame({
            "building_id": b, "meter": meter, "timestamp": hours[n_train:],
            "meter_reading": clean[n_train:],
        }))
    train = pd.concat(train_parts, ignore_index=True)
    test = pd.concat(test_parts, ignore_index=True)
    test.insert(0, "row_id", np.arange(len(test), dtype=np.int64))
    buildings = pd.DataFrame(building_rows, columns=BUILDING_COLUMNS).astype(
        {"year_built": "Int64", "floor_count": "Int64"}
    )
    weather = pd.concat(weather_frames, ignore_index=True)

    files = {
        "train.csv": (train, READING_COLUMNS),
        "building_meta.csv": (buildings, BUILDING_COLUMNS),
        "weather_train.csv": (weather[weather["timestamp"] <= TRAIN_END], WEATHER_COLUMNS),
        "weather_test.csv": (weather[weather["timestamp"] > TRAIN_END], WEATHER_COLUMNS),
        "test.csv": (test, TEST_COLUMNS),
        "ground_truth.csv": (test, ["row_id", "meter_reading"]),
    }
    for name, (frame, columns) in files.items():
        write_table(frame, out / name, columns)
    write_holiday_calendar(holidays, out / "holidays_us.txt")

    for name in [*files, "holidays_us.txt"]:
        rows = len(files[name][0]) if name in files else len(holidays)
        manifest.append({"record": "file", "name": name, "rows": rows,
                         "sha256": _sha256(out / name)})
    manifest.extend(defects)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in manifest:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def manifest_defects(manifest: list[dict], kind: str) -> list[dict]:
    return [r for r in manifest if r.get("record") == "defect" and r["kind"] == kind]
