"""Design-matrix construction.

Feature families: building metadata, calendar (hour, weekday, month,
weekend, holiday), raw and derived weather, causal rolling weather
statistics, and out-of-fold target encodings. Recipes select a named subset;
``minimal``, ``winner1`` and ``winner5`` ship as presets.

The target is ``log1p(meter_reading)``, so squared error on it is the
squared RMSLE.
"""

from __future__ import annotations

import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import WEATHER_VARIABLES

logger = logging.getLogger(__name__)

CATEGORICAL = ("site_id", "building_id", "meter", "primary_use", "hour", "weekday", "month")
ENCODING_KINDS = ("mean", "percentile_rank", "proportion_above_global_median")
_KIND_TAG = {"mean": "mean", "percentile_rank": "pct", "proportion_above_global_median": "prop"}
LAG_STATS = ("mean", "min", "max")
LAG_VARIABLES = ("air_temperature", "dew_temperature")


class FeatureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# matrix


@dataclass
class FeatureMatrix:
    """Row-aligned design matrix.

    ``keys`` holds the row key (building_id, meter, timestamp) plus site_id,
    a primary_use code and,
    for test matrices, row_id. Rows are sorted by the row key.
    """

    keys: pd.DataFrame
    X: np.ndarray
    names: list[str]
    kinds: list[str]
    target: np.ndarray | None = None
    fill_values: dict = field(default_factory=dict)
    encoders: list = field(default_factory=list)

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise FeatureError("column count does not match the registry")
        if len(set(self.names)) != len(self.names):
            raise FeatureError("duplicate feature names")
        if self.X.shape[0] != len(self.keys):
            raise FeatureError("row count does not match keys")
        if self.target is not None and len(self.target) != self.n_rows:
            raise FeatureError("target length does not match rows")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def registry(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.names)}

    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.registry[name]]
        except KeyError:
            raise FeatureError(f"feature {name!r} not in registry") from None

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(
            self.keys.iloc[rows].reset_index(drop=True),
            self.X[rows],
            list(self.names),
            list(self.kinds),
            None if self.target is None else self.target[rows],
            self.fill_values,
            self.encoders,
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)

    @staticmethod
    def load(path) -> "FeatureMatrix":
        with open(path, "rb") as fh:
            return pickle.load(fh)


# ---------------------------------------------------------------------------
# calendar


def load_holiday_calendar(path) -> pd.DatetimeIndex:
    """Dates, one ``YYYY-MM-DD`` per line; ``#`` starts a comment."""
    dates = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            dates.append(pd.Timestamp(line))
    return pd.DatetimeIndex(dates).normalize()


def temporal_features(timestamps, holidays=None) -> dict[str, np.ndarray]:
    ts = pd.DatetimeIndex(timestamps)
    weekday = ts.weekday.to_numpy()
    if holidays is None or len(holidays) == 0:
        is_holiday = np.zeros(len(ts), dtype=bool)
    else:
        is_holiday = ts.normalize().isin(pd.DatetimeIndex(holidays).normalize())
    return {
        "hour": ts.hour.to_numpy(),
        "weekday": weekday,
        "month": ts.month.to_numpy(),
        "is_weekend": weekday >= 5,
        "is_holiday": np.asarray(is_holiday, dtype=bool),
    }


# ---------------------------------------------------------------------------
# weather


def weather_lag_features(grid: pd.DataFrame, windows=(3, 24, 72),
                         variables=LAG_VARIABLES) -> pd.DataFrame:
    """Trailing-window mean/min/max over hours ``(t - w, t]`` for each site.

    ``grid`` must be a complete hourly grid (one row per site and hour); the
    first ``w - 1`` hours of each site use the partial window.
    """
    for w in windows:
        if int(w) <= 0:
            raise FeatureError(f"lag window must be positive, got {w}")
    grid = grid.sort_values(["site_id", "timestamp"], kind="stable")
    out = grid[["site_id", "timestamp"]].copy()
    by_site = grid.groupby("site_id", sort=False)
    for var in variables:
        for w in windows:
            roll = by_site[var].rolling(int(w), min_periods=1)
            for stat in LAG_STATS:
                out[f"{var}_{stat}_{w}"] = getattr(roll, stat)().to_numpy()
    return out.reset_index(drop=True)


def vapor_pressure(dew_temperature):
    """Water vapour pressure in hPa at the given dew point (humidex form)."""
    dew_k = np.asarray(dew_temperature, dtype=float) + 273.15
    return 6.11 * np.exp(5417.7530 * (1.0 / 273.16 - 1.0 / dew_k))


def derived_weather(air_temperature, wind_speed, dew_temperature) -> dict[str, np.ndarray]:
    """Wind chill and a humidex-style heat index.

    ``wind_speed`` is in m/s (as in the weather files). Wind chill uses the
    North American formula with wind in km/h and applies for T <= 10 C and
    wind > 4.8 km/h; otherwise it equals the air temperature. The heat proxy
    is ``T + 0.555 * (e - 10)`` with ``e`` the vapour pressure at the dew
    point, applied for T >= 14 C.
    """
    t = np.asarray(air_temperature, dtype=float)
    v = np.asarray(wind_speed, dtype=float) * 3.6
    v16 = np.power(np.maximum(v, 0.0), 0.16)
    chill = 13.12 + 0.6215 * t - 11.37 * v16 + 0.3965 * t * v16
    wind_chill = np.where((t <= 10.0) & (v > 4.8), chill, t)
    e = vapor_pressure(dew_temperature)
    heat = np.where(t >= 14.0, t + 0.555 * (e - 10.0), t)
    return {"wind_chill": wind_chill, "heat_proxy": heat}


# ---------------------------------------------------------------------------
# target encoding


def encoding_name(key, kind: str) -> str:
    return "te_" + _KIND_TAG[kind] + "__" + "__".join(key)


def _statistics(codes: np.ndarray, y: np.ndarray, kind: str, m: float):
    """Per-category smoothed statistic over one fit set.

    Returns (categories, encodings, global value).
    """
    cats, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y, minlength=len(cats))
    means = sums / counts
    if kind == "mean":
        stat, glob = means, float(np.mean(y))
    elif kind == "percentile_rank":
        k = len(cats)
        ranks = pd.Series(means).rank(method="average").to_numpy()
        stat = (ranks - 1.0) / (k - 1) if k > 1 else np.full(k, 0.5)
        glob = 0.5
    elif kind == "proportion_above_global_median":
        above = (y > np.median(y)).astype(float)
        stat = np.bincount(inverse, weights=above, minlength=len(cats)) / counts
        glob = float(above.mean())
    else:
        raise FeatureError(f"unknown encoding kind {kind!r}")
    if math.isinf(m):
        enc = np.full(len(cats), glob)
    else:
        enc = (counts * stat + m * glob) / (counts + m)
    return cats, enc, glob


@dataclass
class EncodingTable:
    categories: np.ndarray  # sorted category codes
    values: np.ndarray
    fallback: float

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        if len(self.categories) == 0:
            return np.full(len(codes), self.fallback)
        pos = np.searchsorted(self.categories, codes)
        pos_c = np.minimum(pos, len(self.categories) - 1)
        hit = self.categories[pos_c] == codes
        return np.where(hit, self.values[pos_c], self.fallback)


def _category_codes(matrix: FeatureMatrix, key) -> np.ndarray:
    """Stable complex-key code: row-wise bytes of the key columns."""
    cols = np.ascontiguousarray(np.column_stack([matrix.column(k) for k in key]))
    return cols.view(np.dtype((np.void, cols.dtype.itemsize * cols.shape[1]))).ravel()


def default_folds(matrix: FeatureMatrix, n_folds: int) -> np.ndarray:
    """Calendar months interleaved across folds, so every building spans all folds.

    Data covering fewer months than folds is interleaved row by row instead.
    """
    ts = pd.DatetimeIndex(matrix.keys["timestamp"])
    month_index = (ts.year.to_numpy() - ts.year.min()) * 12 + ts.month.to_numpy() - 1
    if len(np.unique(month_index)) < n_folds:
        return (np.arange(matrix.n_rows) % n_folds).astype(np.int64)
    return (month_index % n_folds).astype(np.int64)


@dataclass
class TargetEncoder:
    key: tuple
    kind: str
    m: float
    n_folds: int
    folds: np.ndarray
    table: EncodingTable
    fold_tables: list[EncodingTable]
    train_encoding: np.ndarray  # out-of-fold encodings of the fit rows

    @property
    def name(self) -> str:
        return encoding_name(self.key, self.kind)

    @property
    def global_value(self) -> float:
        return self.table.fallback

    def transform(self, matrix: FeatureMatrix) -> np.ndarray:
        """Encode rows with the table fitted on all training rows."""
        return self.table.lookup(_category_codes(matrix, self.key))

    def encode_fold(self, matrix: FeatureMatrix, fold: int) -> np.ndarray:
        """Encode rows with the table fitted without fold ``fold``."""
        return self.fold_tables[fold].lookup(_category_codes(matrix, self.key))


def fit_target_encoder(
    matrix: FeatureMatrix,
    key,
    kind: str = "mean",
    m: float = 0.0,
    n_folds: int = 5,
    folds=None,
) -> TargetEncoder:
    """Fit a smoothed target encoder; training rows get out-of-fold encodings.

    ``enc = (n_c * stat_c + m * global) / (n_c + m)``. Each fold's table, and
    its global fallback, is computed from the other folds only.
    """
    key = tuple(key)
    if matrix.target is None:
        raise FeatureError("target encoding needs a target column")
    if n_folds < 2:
        raise FeatureError("n_folds must be >= 2")
    if kind not in ENCODING_KINDS:
        raise FeatureError(f"unknown encoding kind {kind!r}")
    missing = [k for k in key if k not in matrix.registry]
    if missing:
        raise FeatureError(f"encoding key {missing} not in registry")
    if m < 0:
        raise FeatureError("smoothing weight m must be >= 0")
    codes = _category_codes(matrix, key)
    y = np.asarray(matrix.target, dtype=float)
    folds = default_folds(matrix, n_folds) if folds is None else np.asarray(folds, dtype=np.int64)
    if len(folds) != matrix.n_rows or folds.min(initial=0) < 0 or folds.max(initial=0) >= n_folds:
        raise FeatureError("fold assignment must cover every row with ids in [0, n_folds)")

    table = EncodingTable(*_statistics(codes, y, kind, m))
    fold_tables = []
    oof = np.empty(matrix.n_rows)
    for f in range(n_folds):
        held = folds == f
        fit = ~held
        if not fit.any():
            raise FeatureError(f"fold {f} holds every row; nothing left to fit its encoding on")
        ft = EncodingTable(*_statistics(codes[fit], y[fit], kind, m))
        fold_tables.append(ft)
        oof[held] = ft.lookup(codes[held])
    return TargetEncoder(key, kind, float(m), n_folds, folds, table, fold_tables, oof)


# ---------------------------------------------------------------------------
# recipes


@dataclass
class EncodingSpec:
    key: tuple
    kind: str = "mean"
    m: float = 10.0
    n_folds: int = 4

    @classmethod
    def from_dict(cls, data: dict) -> "EncodingSpec":
        return cls(tuple(data["key"]), data.get("kind", "mean"), float(data.get("m", 10.0)),
                   int(data.get("n_folds", 4)))


@dataclass
class FeatureRecipe:
    name: str
    features: list[str]
    encodings: list[EncodingSpec] = field(default_factory=list)
    lag_windows: tuple = (3, 24, 72)

    @property
    def feature_names(self) -> list[str]:
        return list(self.features) + [encoding_name(e.key, e.kind) for e in self.encodings]

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureRecipe":
        return cls(
            data.get("name", "inline"),
            list(data["features"]),
            [EncodingSpec.from_dict(e) for e in data.get("encodings", [])],
            tuple(data.get("lag_windows", (3, 24, 72))),
        )


_WINNER1_BASE = [
    "site_id", "building_id", "meter", "primary_use", "log_square_feet", "year_built",
    "floor_count", "hour", "weekday", "month", "is_weekend", "is_holiday",
    "air_temperature", "cloud_coverage", "dew_temperature", "precip_depth_1_hr",
    "sea_level_pressure", "wind_speed", "wind_dir_sin", "wind_dir_cos",
    "wind_chill", "heat_proxy",
    "air_temperature_mean_3", "air_temperature_mean_24", "air_temperature_mean_72",
]

RECIPES = {
    "minimal": FeatureRecipe("minimal", ["meter", "hour", "weekday", "air_temperature"]),
    # 28 features: metadata, calendar with holidays, weather raw/derived/lagged,
    # and building x meter target encodings
    "winner1": FeatureRecipe(
        "winner1",
        _WINNER1_BASE,
        [
            EncodingSpec(("building_id", "meter"), "mean"),
            EncodingSpec(("building_id", "meter", "hour"), "mean"),
            EncodingSpec(("primary_use", "meter"), "mean"),
        ],
    ),
    # 10 features: calendar + weather temporal features + percentile/proportion encodings
    "winner5": FeatureRecipe(
        "winner5",
        ["hour", "weekday", "is_holiday", "air_temperature", "dew_temperature",
         "air_temperature_mean_24", "air_temperature_mean_72"],
        [
            EncodingSpec(("building_id", "meter"), "percentile_rank"),
            EncodingSpec(("building_id", "meter", "hour"), "percentile_rank"),
            EncodingSpec(("building_id", "meter", "hour"), "proportion_above_global_median"),
        ],
    ),
}


def get_recipe(spec) -> FeatureRecipe:
    if isinstance(spec, FeatureRecipe):
        return spec
    if isinstance(spec, dict):
        return FeatureRecipe.from_dict(spec)
    try:
        return RECIPES[spec]
    except KeyError:
        raise FeatureError(f"unknown feature recipe {spec!r}; known: {sorted(RECIPES)}") from None


# ---------------------------------------------------------------------------
# build


def _holiday_flags(timestamps: pd.DatetimeIndex, site: np.ndarray, calendars) -> np.ndarray:
    flags = np.zeros(len(timestamps), dtype=bool)
    if not calendars:
        return flags
    days = timestamps.normalize()
    for s in np.unique(site):
        cal = calendars.get(int(s), calendars.get("default"))
        if cal is not None and len(cal):
            sel = site == s
            flags[sel] = days[sel].isin(cal)
    return flags


def build_matrix(
    readings: pd.DataFrame,
    grid,
    buildings: pd.DataFrame,
    recipe="minimal",
    calendars: dict | None = None,
    encoders: list[TargetEncoder] | None = None,
    fill_values: dict | None = None,
) -> FeatureMatrix:
    """Build the design matrix for ``readings`` (training or test rows).

    ``grid`` is a :class:`~gepiii.preprocess.WeatherGrid` (or its frame)
    covering every (site, hour) of the readings. With a ``meter_reading``
    column and no ``encoders``, target encoders are fitted and the rows get
    out-of-fold encodings; with ``encoders`` they are applied as fitted.
    ``fill_values`` (per-feature training means) default to this data's means.
    ``calendars`` maps site_id (or ``"default"``) to holiday dates.
    """
    recipe = get_recipe(recipe)
    grid_frame = getattr(grid, "frame", grid)
    rows = readings.sort_values(["building_id", "meter", "timestamp"], kind="stable")
    rows = rows.reset_index(drop=True)

    meta = buildings.set_index("building_id")
    unknown = ~rows["building_id"].isin(meta.index)
    if unknown.any():
        raise FeatureError(f"buildings without metadata: {sorted(rows.loc[unknown, 'building_id'].unique())[:10]}")
    site = rows["building_id"].map(meta["site_id"]).to_numpy(dtype=np.int64)
    ts = pd.DatetimeIndex(rows["timestamp"])

    lags = weather_lag_features(grid_frame, recipe.lag_windows)
    weather = grid_frame[["site_id", "timestamp", *WEATHER_VARIABLES]].merge(
        lags, on=["site_id", "timestamp"], how="left"
    )
    joined = pd.DataFrame({"site_id": site, "timestamp": ts}).merge(
        weather, on=["site_id", "timestamp"], how="left", indicator=True
    )
    miss = joined["_merge"] != "both"
    if miss.any():
        first = joined.loc[miss].iloc[0]
        raise FeatureError(
            f"weather grid has no row for site {first['site_id']} at {first['timestamp']} "
            f"({int(miss.sum())} rows affected)"
        )

    uses = sorted(buildings["primary_use"].unique())
    use_code = meta["primary_use"].map({u: i for i, u in enumerate(uses)})
    cols: dict[str, np.ndarray] = {
        "site_id": site.astype(float),
        "building_id": rows["building_id"].to_numpy(dtype=float),
        "meter": rows["meter"].to_numpy(dtype=float),
        "primary_use": rows["building_id"].map(use_code).to_numpy(dtype=float),
        "log_square_feet": np.log10(rows["building_id"].map(meta["square_feet"]).to_numpy(dtype=float)),
        "year_built": rows["building_id"].map(meta["year_built"]).astype("Float64").to_numpy(dtype=float, na_value=np.nan),
        "floor_count": rows["building_id"].map(meta["floor_count"]).astype("Float64").to_numpy(dtype=float, na_value=np.nan),
    }
    temporal = temporal_features(ts)
    temporal["is_holiday"] = _holiday_flags(ts, site, calendars)
    cols.update({k: np.asarray(v, dtype=float) for k, v in temporal.items()})
    for var in WEATHER_VARIABLES:
        cols[var] = joined[var].to_numpy(dtype=float)
    for c in lags.columns[2:]:
        cols[c] = joined[c].to_numpy(dtype=float)
    rad = np.deg2rad(cols["wind_direction"])
    cols["wind_dir_sin"] = np.sin(rad)
    cols["wind_dir_cos"] = np.cos(rad)
    cols.update(derived_weather(cols["air_temperature"], cols["wind_speed"], cols["dew_temperature"]))

    needed = list(dict.fromkeys(
        list(recipe.features) + [k for e in recipe.encodings for k in e.key]
    ))
    unknown_feats = [n for n in needed if n not in cols]
    if unknown_feats:
        raise FeatureError(f"recipe {recipe.name!r} names unknown features {unknown_feats}")

    X = np.column_stack([cols[n] for n in needed]) if needed else np.empty((len(rows), 0))
    if fill_values is None:
        with np.errstate(all="ignore"):
            fill_values = {n: float(np.nanmean(cols[n])) if np.isfinite(cols[n]).any() else 0.0
                           for n in needed}
    for j, n in enumerate(needed):
        bad = ~np.isfinite(X[:, j])
        if bad.any():
            X[bad, j] = fill_values.get(n, 0.0)

    keys = pd.DataFrame({
        "building_id": rows["building_id"].to_numpy(dtype=np.int64),
        "meter": rows["meter"].to_numpy(dtype=np.int64),
        "timestamp": ts,
        "site_id": site,
        "primary_use": rows["building_id"].map(use_code).to_numpy(dtype=np.int64),
    })
    if "row_id" in rows:
        keys["row_id"] = rows["row_id"].to_numpy(dtype=np.int64)
    target = None
    if "meter_reading" in rows:
        target = np.log1p(rows["meter_reading"].to_numpy(dtype=float))
    kinds = ["categorical" if n in CATEGORICAL else "numeric" for n in needed]
    base = FeatureMatrix(keys, X, needed, kinds, target, fill_values)

    enc_cols = []
    if recipe.encodings:
        if encoders is None:
            if target is None:
                raise FeatureError("target encoders must be supplied for unlabeled rows")
            encoders = [fit_target_encoder(base, e.key, e.kind, e.m, e.n_folds)
                        for e in recipe.encodings]
            enc_cols = [enc.train_encoding for enc in encoders]
        else:
            enc_cols = [enc.transform(base) for enc in encoders]
    selected = [base.registry[n] for n in recipe.features]
    X_final = np.column_stack([X[:, selected], *enc_cols]) if (selected or enc_cols) else X[:, :0]
    names = recipe.feature_names
    return FeatureMatrix(
        keys,
        np.asfortranarray(X_final, dtype=float),
        names,
        [kinds[i] for i in selected] + ["numeric"] * len(enc_cols),
        target,
        fill_values,
        list(encoders or []),
    )
