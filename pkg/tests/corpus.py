"""Generated station corpora for pipeline tests."""

from __future__ import annotations

import calendar
import datetime as dt
from pathlib import Path

import numpy as np

from oracles import synthetic_rows
from seasonal_forecast.weather_data import (
    DailyRecord,
    MonthlyRecord,
    format_daily_csv,
    format_feature_csv,
    format_monthly_csv,
)


def daily_records(station: str, start: dt.date, end: dt.date, seed: int = 0, skip=lambda d: False) -> list[DailyRecord]:
    """Seasonal-cycle temperatures and sparse rain, one record per day in [start, end]."""
    rng = np.random.default_rng(seed)
    out = []
    day = start
    while day <= end:
        if not skip(day):
            base = 15.0 - 9.0 * np.cos(2 * np.pi * (day.timetuple().tm_yday - 15) / 365.25)
            tmean = round(base + rng.normal(0, 2.0), 1)
            half = round(rng.uniform(2.0, 7.0), 1)
            rain = round(float(rng.exponential(6.0)), 1) if rng.random() < 0.3 else 0.0
            out.append(DailyRecord(station, day, round(tmean - half, 1), round(tmean + half, 1), tmean, rain))
        day += dt.timedelta(days=1)
    return out


def monthly_records(station: str, first: tuple[int, int], last: tuple[int, int], seed: int = 0, skip=lambda y, m: False) -> list[MonthlyRecord]:
    """Full-coverage monthly records from ``first`` to ``last`` (year, month) inclusive."""
    rng = np.random.default_rng(seed)
    out = []
    y, m = first
    while (y, m) <= last:
        if not skip(y, m):
            dim = calendar.monthrange(y, m)[1]
            tmean = 15.0 - 9.0 * np.cos(2 * np.pi * (m - 1) / 12) + rng.normal(0, 1.0)
            half = rng.uniform(3.0, 6.0)
            rainy = int(rng.integers(0, 15))
            out.append(MonthlyRecord(
                station, y, m, float(tmean - half), float(tmean + half), float(tmean),
                float(rng.uniform(0, 200)), rainy, dim,
            ))
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


def write_station_files(folder: Path) -> tuple[Path, Path]:
    """A daily file for station A (1970-1976) and a monthly file for station B (1940-1970)."""
    daily = folder / "daily.csv"
    monthly = folder / "monthly.csv"
    daily.write_text(format_daily_csv(daily_records("A", dt.date(1970, 12, 1), dt.date(1976, 11, 30), 1)))
    monthly.write_text(format_monthly_csv(monthly_records("B", (1940, 1), (1970, 12), 2)))
    return daily, monthly


def write_planted_features(path: Path, n: int, seed: int, target) -> Path:
    path.write_text(format_feature_csv(synthetic_rows(n, seed, target)))
    return path
