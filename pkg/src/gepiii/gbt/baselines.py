"""Per-meter hour-of-week climatology, the reference a forecaster has to beat."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd


@dataclass
class HourOfWeekBaseline:
    table: pd.Series  # (building_id, meter, hour_of_week) -> mean log1p reading
    meter_means: pd.Series  # (building_id, meter) -> mean log1p reading
    global_mean: float

    def predict(self, rows: pd.DataFrame) -> np.ndarray:
        """Predictions in log1p space for rows with building_id, meter, timestamp."""
        key = _key_frame(rows)
        out = key.merge(self.table.rename("v").reset_index(),
                        on=["building_id", "meter", "how"], how="left")["v"].to_numpy()
        miss = np.isnan(out)
        if miss.any():
            fb = key.merge(self.meter_means.rename("v").reset_index(),
                           on=["building_id", "meter"], how="left")["v"].to_numpy()
            out[miss] = fb[miss]
        out[np.isnan(out)] = self.global_mean
        return out


def _key_frame(rows: pd.DataFrame) -> pd.DataFrame:
    ts = pd.DatetimeIndex(rows["timestamp"])
    return pd.DataFrame({
        "building_id": rows["building_id"].to_numpy(dtype=np.int64),
        "meter": rows["meter"].to_numpy(dtype=np.int64),
        "how": ts.weekday.to_numpy() * 24 + ts.hour.to_numpy(),
    })


def fit_hour_of_week_baseline(readings: pd.DataFrame) -> HourOfWeekBaseline:
    """Mean of log1p(meter_reading) per (building, meter, hour of week)."""
    key = _key_frame(readings)
    key["y"] = np.log1p(readings["meter_reading"].to_numpy(dtype=float))
    table = key.groupby(["building_id", "meter", "how"])["y"].mean()
    meter_means = key.groupby(["building_id", "meter"])["y"].mean()
    return HourOfWeekBaseline(table, meter_means, float(key["y"].mean()))
