"""Meter cleaning, weather imputation and timezone alignment.

Cleaning rules are applied in declared order and each rule sees the output
of the previous one. Every dropped row is attributed to exactly one rule in
the :class:`CleaningReport`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import WEATHER_VARIABLES

logger = logging.getLogger(__name__)

HOUR = pd.Timedelta(hours=1)
RULE_KINDS = ("constant_streak", "zero_streak", "site_wide_zero", "unit_rescale", "manual_exclusion")
DEFAULT_PARAMS = {
    "constant_streak": {"min_len": 48},
    "zero_streak": {"min_len": 24},
    "site_wide_zero": {"min_fraction": 0.3, "min_len": 6},
    "unit_rescale": {},
    "manual_exclusion": {},
}
PEAK_HOUR = 14
OFFSET_RANGE = range(-12, 15)


class CleaningConfigError(ValueError):
    pass


class InsufficientWeatherError(ValueError):
    """Raised when a series is too short to estimate a timezone offset."""


@dataclass(frozen=True)
class Interval:
    """Inclusive index range ``[start, end]`` into a sorted series."""

    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass
class CleaningRule:
    kind: str
    params: dict = field(default_factory=dict)
    scope: dict = field(default_factory=dict)  # optional site_id / building_id / meter

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise CleaningConfigError(f"unknown cleaning rule kind {self.kind!r}")
        self.params = {**DEFAULT_PARAMS[self.kind], **(self.params or {})}
        self.scope = dict(self.scope or {})
        bad_scope = set(self.scope) - {"site_id", "building_id", "meter"}
        if bad_scope:
            raise CleaningConfigError(f"unknown scope keys {sorted(bad_scope)}")

    def validate(self) -> None:
        p = self.params
        if self.kind in ("constant_streak", "zero_streak", "site_wide_zero"):
            if not p["min_len"] > 0:
                raise CleaningConfigError(f"{self.kind}: min_len must be > 0")
        if self.kind == "constant_streak" and p["min_len"] < 2:
            raise CleaningConfigError("constant_streak: min_len must be >= 2")
        if self.kind == "site_wide_zero" and not 0 < p["min_fraction"] <= 1:
            raise CleaningConfigError("site_wide_zero: min_fraction must be in (0, 1]")
        if self.kind == "unit_rescale":
            if "factor" not in p or not p["factor"] > 0:
                raise CleaningConfigError("unit_rescale: factor must be > 0")
        if self.kind == "manual_exclusion":
            if "start" not in p or "end" not in p:
                raise CleaningConfigError("manual_exclusion: start and end are required")
            if pd.Timestamp(p["start"]) > pd.Timestamp(p["end"]):
                raise CleaningConfigError("manual_exclusion: start after end")

    @classmethod
    def from_dict(cls, data: dict) -> "CleaningRule":
        data = dict(data)
        kind = data.pop("kind")
        scope = data.pop("scope", {})
        params = data.pop("params", {})
        params.update(data)
        return cls(kind, params, scope)

    def scope_key(self) -> tuple:
        return tuple(sorted(self.scope.items()))


@dataclass
class CleaningReport:
    rows_in: int = 0
    rows_out: int = 0
    rules: list[dict] = field(default_factory=list)
    intervals: list[dict] = field(default_factory=list)

    @property
    def rows_dropped(self) -> int:
        return sum(r["dropped"] for r in self.rules)

    def to_dict(self) -> dict:
        return {
            "rows_in": self.rows_in,
            "rows_out": self.rows_out,
            "rows_dropped": self.rows_dropped,
            "rules": self.rules,
            "intervals": self.intervals,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# streak detection


def find_constant_streaks(timestamps, values, min_len: int = 48) -> list[Interval]:
    """Maximal runs of identical consecutive hourly values, at least ``min_len`` long.

    A missing hour breaks a run. ``timestamps`` must be sorted.
    """
    if min_len < 2:
        raise ValueError("min_len must be >= 2")
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n == 0:
        return []
    ts = pd.DatetimeIndex(timestamps)
    same = np.zeros(n, dtype=bool)
    same[1:] = (values[1:] == values[:-1]) & (np.diff(ts.asi8) == HOUR.value)
    starts = np.flatnonzero(~same)
    ends = np.append(starts[1:] - 1, n - 1)
    lengths = ends - starts + 1
    keep = lengths >= min_len
    return [Interval(int(s), int(e)) for s, e in zip(starts[keep], ends[keep])]


def find_zero_streaks(timestamps, values, min_len: int = 24) -> list[Interval]:
    """Constant streaks whose value is exactly zero (length >= ``min_len``)."""
    values = np.asarray(values, dtype=float)
    if min_len <= 1:
        return [Interval(int(i), int(i)) for i in np.flatnonzero(values == 0.0)]
    return [
        iv for iv in find_constant_streaks(timestamps, values, min_len)
        if values[iv.start] == 0.0
    ]


def find_site_wide_zeros(
    readings: pd.DataFrame,
    buildings: pd.DataFrame,
    min_fraction: float = 0.3,
    min_len: int = 6,
) -> tuple[list[tuple[int, int, pd.Timestamp, pd.Timestamp]], np.ndarray]:
    """Windows where many meters of one type at one site read exactly zero.

    For every (site, meter type) with at least two meters, an hour qualifies
    when the share of that site's meters of that type reading exactly 0 is
    ``>= min_fraction``; qualifying runs of ``>= min_len`` consecutive hours
    become intervals. Returns ``(intervals, mask)`` where ``mask`` marks the
    zero readings inside the intervals (aligned with ``readings`` rows).
    """
    mask = np.zeros(len(readings), dtype=bool)
    if readings.empty:
        return [], mask
    site = readings["building_id"].map(buildings.set_index("building_id")["site_id"])
    frame = pd.DataFrame({
        "site_id": site.to_numpy(),
        "meter": readings["meter"].to_numpy(),
        "building_id": readings["building_id"].to_numpy(),
        "timestamp": readings["timestamp"].to_numpy(),
        "zero": (readings["meter_reading"] == 0.0).to_numpy(),
    })
    intervals = []
    for (s, m), grp in frame.groupby(["site_id", "meter"], sort=True):
        n_meters = grp["building_id"].nunique()
        if n_meters < 2:
            continue
        zeros = grp.loc[grp["zero"]]
        if zeros.empty:
            continue
        counts = zeros.groupby("timestamp").size()
        hits = counts.index[(counts / n_meters) >= min_fraction]
        if len(hits) == 0:
            continue
        hits = pd.DatetimeIndex(hits).sort_values()
        gap = np.ones(len(hits), dtype=bool)
        gap[1:] = np.diff(hits.asi8) != HOUR.value
        starts = np.flatnonzero(gap)
        ends = np.append(starts[1:] - 1, len(hits) - 1)
        for a, b in zip(starts, ends):
            if b - a + 1 < min_len:
                continue
            t0, t1 = hits[a], hits[b]
            intervals.append((int(s), int(m), t0, t1))
            inside = grp.index[grp["zero"] & (grp["timestamp"] >= t0) & (grp["timestamp"] <= t1)]
            mask[inside] = True
    return intervals, mask


# ---------------------------------------------------------------------------
# rule application


def _scope_mask(readings: pd.DataFrame, site: pd.Series, scope: dict) -> np.ndarray:
    mask = np.ones(len(readings), dtype=bool)
    if "site_id" in scope:
        mask &= site.to_numpy() == scope["site_id"]
    if "building_id" in scope:
        mask &= readings["building_id"].to_numpy() == scope["building_id"]
    if "meter" in scope:
        mask &= readings["meter"].to_numpy() == scope["meter"]
    return mask


def _streak_mask(readings: pd.DataFrame, scope: np.ndarray, finder, min_len, rule_idx, report):
    drop = np.zeros(len(readings), dtype=bool)
    sub = readings.loc[scope]
    for (b, m), grp in sub.groupby(["building_id", "meter"], sort=True):
        idx = grp.index.to_numpy()
        for iv in finder(grp["timestamp"].to_numpy(), grp["meter_reading"].to_numpy(), min_len):
            drop[idx[iv.start: iv.end + 1]] = True
            report.intervals.append({
                "rule": rule_idx, "building_id": int(b), "meter": int(m),
                "start": grp["timestamp"].iat[iv.start], "end": grp["timestamp"].iat[iv.end],
                "rows": iv.length,
            })
    return drop


def validate_rules(rules: list[CleaningRule]) -> None:
    seen = set()
    for rule in rules:
        rule.validate()
        if rule.kind == "unit_rescale":
            key = rule.scope_key()
            if key in seen:
                raise CleaningConfigError(f"conflicting unit_rescale rules for scope {dict(key)}")
            seen.add(key)


def apply_cleaning(
    readings: pd.DataFrame,
    rules: list[CleaningRule],
    buildings: pd.DataFrame | None = None,
) -> tuple[pd.DataFrame, CleaningReport]:
    """Apply ``rules`` in order; return cleaned readings and the accounting report."""
    validate_rules(rules)
    report = CleaningReport(rows_in=len(readings))
    out = readings.reset_index(drop=True).copy()
    site_of = None
    if buildings is not None:
        site_of = buildings.set_index("building_id")["site_id"]
    for i, rule in enumerate(rules):
        if site_of is not None:
            site = out["building_id"].map(site_of)
        elif "site_id" in rule.scope or rule.kind == "site_wide_zero":
            raise CleaningConfigError(f"rule {rule.kind} needs building metadata for site lookup")
        else:
            site = pd.Series(np.zeros(len(out), dtype=np.int64))
        scope = _scope_mask(out, site, rule.scope)
        entry = {"rule": i, "kind": rule.kind, "scope": rule.scope, "dropped": 0, "rescaled": 0}
        drop = np.zeros(len(out), dtype=bool)
        p = rule.params
        if rule.kind == "constant_streak":
            drop = _streak_mask(out, scope, find_constant_streaks, p["min_len"], i, report)
        elif rule.kind == "zero_streak":
            drop = _streak_mask(out, scope, find_zero_streaks, p["min_len"], i, report)
        elif rule.kind == "site_wide_zero":
            found, zmask = find_site_wide_zeros(out.loc[scope].reset_index(drop=True),
                                                buildings, p["min_fraction"], p["min_len"])
            drop[np.flatnonzero(scope)[zmask]] = True
            for s, m, t0, t1 in found:
                report.intervals.append({"rule": i, "site_id": s, "meter": m,
                                         "start": t0, "end": t1})
        elif rule.kind == "unit_rescale":
            out.loc[scope, "meter_reading"] = out.loc[scope, "meter_reading"] * p["factor"]
            entry["rescaled"] = int(scope.sum())
        elif rule.kind == "manual_exclusion":
            ts = out["timestamp"]
            drop = scope & (ts >= pd.Timestamp(p["start"])).to_numpy() & (
                ts <= pd.Timestamp(p["end"])).to_numpy()
        entry["dropped"] = int(drop.sum())
        report.rules.append(entry)
        if drop.any():
            out = out.loc[~drop].reset_index(drop=True)
        logger.debug("rule %d %s dropped %d rows", i, rule.kind, entry["dropped"])
    report.rows_out = len(out)
    assert report.rows_dropped == report.rows_in - report.rows_out
    return out, report


# ---------------------------------------------------------------------------
# weather


@dataclass
class WeatherGrid:
    """Complete hourly weather per site.

    ``frame`` holds site_id, timestamp, the weather variables, and one
    ``imputed_<variable>`` boolean column per variable. ``unavailable`` lists
    (site_id, variable) pairs with no observation at all; those stay missing.
    """

    frame: pd.DataFrame
    unavailable: list[tuple[int, str]] = field(default_factory=list)

    @property
    def imputed_count(self) -> int:
        return int(sum(self.frame[f"imputed_{v}"].sum() for v in WEATHER_VARIABLES))


def _fill_series(values: np.ndarray, hod: np.ndarray, max_gap_linear: int) -> np.ndarray:
    missing = np.isnan(values)
    if not missing.any():
        return values
    out = values.copy()
    observed = ~missing
    profile = np.full(24, np.nan)
    for h in range(24):
        sel = observed & (hod == h)
        if sel.any():
            profile[h] = values[sel].mean()
    profile[np.isnan(profile)] = values[observed].mean()
    edges = np.flatnonzero(np.diff(np.concatenate(([0], missing.astype(np.int8), [0]))))
    for start, stop in zip(edges[::2], edges[1::2]):
        length = stop - start
        interior = start > 0 and stop < len(values)
        if interior and length <= max_gap_linear:
            left, right = start - 1, stop
            frac = (np.arange(start, stop) - left) / (right - left)
            out[start:stop] = values[left] + frac * (values[right] - values[left])
        else:
            out[start:stop] = profile[hod[start:stop]]
    return out


def impute_weather(
    weather: pd.DataFrame,
    max_gap_linear: int = 6,
    start=None,
    end=None,
) -> WeatherGrid:
    """Reindex every site onto a complete hourly grid and fill gaps.

    Gaps of at most ``max_gap_linear`` hours that have observations on both
    sides are linearly interpolated in time; all other gaps take the site's
    hour-of-day mean of observed values. The grid spans ``start``..``end``
    (defaults: earliest and latest timestamp in ``weather``).
    """
    if weather is None or weather.empty:
        raise ValueError("empty weather input")
    start = pd.Timestamp(start) if start is not None else weather["timestamp"].min()
    end = pd.Timestamp(end) if end is not None else weather["timestamp"].max()
    hours = pd.date_range(start, end, freq="h")
    hod = hours.hour.to_numpy()
    frames, unavailable = [], []
    for site, grp in weather.groupby("site_id", sort=True):
        g = grp.set_index("timestamp")[WEATHER_VARIABLES].reindex(hours)
        block = {"site_id": np.full(len(hours), site, dtype=np.int64), "timestamp": hours}
        for var in WEATHER_VARIABLES:
            vals = g[var].to_numpy(dtype=float)
            missing = np.isnan(vals)
            if missing.all():
                unavailable.append((int(site), var))
                block[var] = vals
                block[f"imputed_{var}"] = np.zeros(len(hours), dtype=bool)
                continue
            block[var] = _fill_series(vals, hod, max_gap_linear)
            block[f"imputed_{var}"] = missing
        frames.append(pd.DataFrame(block))
    if unavailable:
        logger.warning("weather variables with no observations left missing: %s", unavailable)
    return WeatherGrid(pd.concat(frames, ignore_index=True), unavailable)


# ---------------------------------------------------------------------------
# timezone


def estimate_timezone_offset(timestamps, air_temperature, min_days: int = 14) -> int:
    """Hour offset that moves the mean diurnal temperature peak to 14:00.

    The mean hour-of-day profile is scored against a 24 h cosine peaking at
    14:00 for every candidate offset in [-12, 14]; the best score wins, ties
    going to the smaller ``|offset|`` and then to the negative one. Adding the
    returned offset to the file timestamps gives local time.

    Raises :class:`InsufficientWeatherError` with fewer than ``min_days``
    distinct days of observations or an hour of day never observed.
    """
    ts = pd.DatetimeIndex(timestamps)
    temp = np.asarray(air_temperature, dtype=float)
    ok = ~np.isnan(temp)
    ts, temp = ts[ok], temp[ok]
    if ts.normalize().nunique() < min_days:
        raise InsufficientWeatherError(f"need >= {min_days} days of air_temperature")
    hod = ts.hour.to_numpy()
    counts = np.bincount(hod, minlength=24)
    if (counts == 0).any():
        raise InsufficientWeatherError("some hours of day have no observations")
    profile = np.bincount(hod, weights=temp, minlength=24) / counts
    profile = profile - profile.mean()
    basis = np.cos(2 * np.pi * np.arange(24) / 24.0)
    best, best_score = None, -np.inf
    # candidate order encodes the tie-break: |o| ascending, negative first
    for o in sorted(OFFSET_RANGE, key=lambda o: (abs(o), o)):
        # file hour h maps to local hour h + o; score alignment with 14:00
        score = float(np.dot(profile, basis[(np.arange(24) + o - PEAK_HOUR) % 24]))
        if score > best_score:
            best, best_score = o, score
    return int(best)


def correct_timezones(weather: pd.DataFrame, offsets: dict[int, int]) -> pd.DataFrame:
    """Shift each site's weather timestamps by its offset (hours)."""
    out = weather.copy()
    for site, off in offsets.items():
        if off:
            sel = out["site_id"] == site
            out.loc[sel, "timestamp"] = out.loc[sel, "timestamp"] + pd.Timedelta(hours=off)
    return out.sort_values(["site_id", "timestamp"], kind="stable").reset_index(drop=True)


def estimate_site_offsets(weather: pd.DataFrame) -> dict[int, int]:
    offsets = {}
    for site, grp in weather.groupby("site_id", sort=True):
        try:
            offsets[int(site)] = estimate_timezone_offset(grp["timestamp"], grp["air_temperature"])
        except InsufficientWeatherError as exc:
            logger.warning("site %s: timezone offset not estimated (%s)", site, exc)
            offsets[int(site)] = 0
    return offsets
