"""Station record ingestion and seasonal feature construction.

Daily observations are rolled up to months, months to meteorological
seasons (winter = Dec of the previous year + Jan + Feb) and calendar years,
and the per-station aggregates are joined into feature vectors whose target
is the same season's mean temperature one year later. Gaps are never
interpolated: an aggregate below the coverage threshold is simply missing.
"""

from __future__ import annotations

import calendar
import csv
import datetime as dt
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

DAILY_HEADER = ("station_id", "date", "tmin_c", "tmax_c", "tmean_c", "rain_mm")
MONTHLY_HEADER = (
    "station_id", "year", "month", "tmin_mean_c", "tmax_mean_c", "tmean_c",
    "rain_total_mm", "rainy_days", "days_present",
)
FEATURE_HEADER = ("year", "season_code", "mst", "msdmt", "msdmt_min", "myt", "msr", "nsrd", "mstny")
OFFSET_HEADER = ("station_id", "season_code", "variable", "delta")

# feature CSV column -> formula variable
COLUMN_TO_VARIABLE = {
    "year": "Y", "season_code": "S", "mst": "MST", "msdmt": "MSDMT",
    "msdmt_min": "MSDmT", "myt": "MYT", "msr": "MSR", "nsrd": "NSRD",
}
OFFSET_VARIABLES = ("mst", "msdmt", "msdmt_min", "myt", "msr", "nsrd")

DEFAULT_RAINY_THRESHOLD_MM = 1.0
DEFAULT_MIN_COVERAGE = 0.8


class DataFormatError(ValueError):
    """Input is structurally unreadable (missing header, wrong columns)."""


class DataValidationError(ValueError):
    """Records parsed but violate a domain invariant.

    ``issues`` holds every problem found as ``(line_number, message)``;
    ``records`` holds whatever did validate.
    """

    def __init__(self, issues: list[tuple[int, str]], records: list | None = None):
        self.issues = issues
        self.records = records or []
        shown = "; ".join(f"line {n}: {msg}" if n else msg for n, msg in issues[:5])
        more = f" (+{len(issues) - 5} more)" if len(issues) > 5 else ""
        super().__init__(f"{len(issues)} invalid record(s): {shown}{more}")


class Season(IntEnum):
    WINTER = 1
    SPRING = 2
    SUMMER = 3
    AUTUMN = 4

    @property
    def label(self) -> str:
        return self.name.capitalize()


# (month, year offset) pairs per season
SEASON_MONTHS = {
    Season.WINTER: ((12, -1), (1, 0), (2, 0)),
    Season.SPRING: ((3, 0), (4, 0), (5, 0)),
    Season.SUMMER: ((6, 0), (7, 0), (8, 0)),
    Season.AUTUMN: ((9, 0), (10, 0), (11, 0)),
}


@dataclass(frozen=True)
class DailyRecord:
    station_id: str
    date: dt.date
    tmin_c: float
    tmax_c: float
    tmean_c: float
    rain_mm: float

    def problems(self) -> list[str]:
        out = []
        if not self.tmin_c <= self.tmax_c:
            out.append(f"tmin {self.tmin_c} > tmax {self.tmax_c}")
        elif not self.tmin_c <= self.tmean_c <= self.tmax_c:
            out.append(f"tmean {self.tmean_c} outside [{self.tmin_c}, {self.tmax_c}]")
        if not self.rain_mm >= 0:
            out.append(f"negative rain {self.rain_mm}")
        return out


@dataclass(frozen=True)
class MonthlyRecord:
    station_id: str
    year: int
    month: int
    tmin_mean_c: float
    tmax_mean_c: float
    tmean_c: float
    rain_total_mm: float
    rainy_days: int
    days_present: int

    def problems(self) -> list[str]:
        out = []
        if not 1 <= self.month <= 12:
            return [f"month {self.month} out of range"]
        dim = calendar.monthrange(self.year, self.month)[1]
        if not 0 <= self.rainy_days <= self.days_present <= dim:
            out.append(f"need 0 <= rainy_days <= days_present <= {dim}")
        if not self.tmin_mean_c <= self.tmean_c <= self.tmax_mean_c:
            out.append("need tmin_mean <= tmean <= tmax_mean")
        if not self.rain_total_mm >= 0:
            out.append("negative rain total")
        return out


@dataclass(frozen=True)
class SeasonalAggregate:
    mst: float
    msdmt: float
    msdmt_min: float
    msr: float
    nsrd: int


@dataclass(frozen=True)
class FeatureVector:
    """One labelled example: eight inputs and the next-year target."""

    year: int
    season: Season
    mst: float
    msdmt: float
    msdmt_min: float
    myt: float
    msr: float
    nsrd: int
    mstny: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "season", Season(self.season))
        if not self.msdmt_min <= self.mst <= self.msdmt:
            raise ValueError(f"({self.year}, {self.season.label}): need MSDmT <= MST <= MSDMT")
        if self.nsrd < 0 or self.nsrd != int(self.nsrd):
            raise ValueError(f"({self.year}, {self.season.label}): NSRD must be a non-negative integer")
        if self.msr < 0:
            raise ValueError(f"({self.year}, {self.season.label}): MSR must be non-negative")

    def inputs(self) -> dict[str, float]:
        return {
            "Y": float(self.year), "S": float(int(self.season)), "MST": self.mst,
            "MSDMT": self.msdmt, "MSDmT": self.msdmt_min, "MYT": self.myt,
            "MSR": self.msr, "NSRD": float(self.nsrd),
        }


def columns(rows: Sequence[FeatureVector]) -> dict[str, np.ndarray]:
    """Column arrays keyed by formula variable name."""
    return {
        "Y": np.array([r.year for r in rows], dtype=float),
        "S": np.array([int(r.season) for r in rows], dtype=float),
        "MST": np.array([r.mst for r in rows], dtype=float),
        "MSDMT": np.array([r.msdmt for r in rows], dtype=float),
        "MSDmT": np.array([r.msdmt_min for r in rows], dtype=float),
        "MYT": np.array([r.myt for r in rows], dtype=float),
        "MSR": np.array([r.msr for r in rows], dtype=float),
        "NSRD": np.array([r.nsrd for r in rows], dtype=float),
    }


def targets(rows: Sequence[FeatureVector]) -> np.ndarray:
    if any(r.mstny is None for r in rows):
        raise ValueError("rows without a target")
    return np.array([r.mstny for r in rows], dtype=float)


# -- CSV -----------------------------------------------------------------------


def _as_text(content: bytes | str) -> str:
    if isinstance(content, bytes):
        return content.decode("utf-8")
    return content


def _reader(content: bytes | str, header: Sequence[str]):
    """Yield (line_number, row) after checking the header; '#' lines are skipped."""
    lines = [ln for ln in _as_text(content).splitlines()]
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip() and not ln.lstrip().startswith("#")]
    if not numbered:
        raise DataFormatError(f"missing header (expected {','.join(header)})")
    first_no, first = numbered[0]
    got = [c.strip() for c in next(csv.reader([first]))]
    if got != list(header):
        raise DataFormatError(f"line {first_no}: bad header {','.join(got)!r}, expected {','.join(header)!r}")
    for no, ln in numbered[1:]:
        yield no, [c.strip() for c in next(csv.reader([ln]))]


def _fmt(x: float) -> str:
    return repr(float(x))


def parse_daily_csv(content: bytes | str) -> list[DailyRecord]:
    """Parse the daily CSV format.

    Raises DataFormatError on a missing or wrong header. Record problems
    (malformed numbers or dates, invariant violations) are collected across
    the whole file and raised together as DataValidationError.
    """
    records, issues = [], []
    for no, row in _reader(content, DAILY_HEADER):
        if len(row) != len(DAILY_HEADER):
            issues.append((no, f"expected {len(DAILY_HEADER)} fields, got {len(row)}"))
            continue
        try:
            date = dt.date.fromisoformat(row[1])
        except ValueError:
            issues.append((no, f"bad date {row[1]!r}"))
            continue
        try:
            values = [float(v) for v in row[2:]]
        except ValueError as exc:
            issues.append((no, f"malformed number ({exc})"))
            continue
        if not all(math.isfinite(v) for v in values):
            issues.append((no, "non-finite value"))
            continue
        rec = DailyRecord(row[0], date, *values)
        bad = rec.problems()
        if bad:
            issues.extend((no, msg) for msg in bad)
            continue
        records.append(rec)
    if issues:
        raise DataValidationError(issues, records)
    return records


def format_daily_csv(records: Iterable[DailyRecord]) -> str:
    out = [",".join(DAILY_HEADER)]
    for r in records:
        out.append(",".join([r.station_id, r.date.isoformat(), _fmt(r.tmin_c), _fmt(r.tmax_c), _fmt(r.tmean_c), _fmt(r.rain_mm)]))
    return "\n".join(out) + "\n"


def parse_monthly_csv(content: bytes | str) -> list[MonthlyRecord]:
    records, issues = [], []
    for no, row in _reader(content, MONTHLY_HEADER):
        if len(row) != len(MONTHLY_HEADER):
            issues.append((no, f"expected {len(MONTHLY_HEADER)} fields, got {len(row)}"))
            continue
        try:
            rec = MonthlyRecord(
                row[0], int(row[1]), int(row[2]), float(row[3]), float(row[4]),
                float(row[5]), float(row[6]), int(row[7]), int(row[8]),
            )
        except ValueError as exc:
            issues.append((no, f"malformed field ({exc})"))
            continue
        bad = rec.problems()
        if bad:
            issues.extend((no, msg) for msg in bad)
            continue
        records.append(rec)
    if issues:
        raise DataValidationError(issues, records)
    return records


def format_monthly_csv(records: Iterable[MonthlyRecord]) -> str:
    out = [",".join(MONTHLY_HEADER)]
    for r in records:
        out.append(",".join([
            r.station_id, str(r.year), str(r.month), _fmt(r.tmin_mean_c), _fmt(r.tmax_mean_c),
            _fmt(r.tmean_c), _fmt(r.rain_total_mm), str(r.rainy_days), str(r.days_present),
        ]))
    return "\n".join(out) + "\n"


def parse_feature_csv(content: bytes | str) -> list[FeatureVector]:
    """Read a feature table; an empty ``mstny`` cell means no target."""
    rows, issues = [], []
    for no, row in _reader(content, FEATURE_HEADER):
        if len(row) != len(FEATURE_HEADER):
            issues.append((no, f"expected {len(FEATURE_HEADER)} fields, got {len(row)}"))
            continue
        try:
            nsrd = float(row[7])
            if nsrd != int(nsrd):
                raise ValueError(f"nsrd {row[7]!r} is not an integer")
            rows.append(FeatureVector(
                int(row[0]), Season(int(row[1])), float(row[2]), float(row[3]), float(row[4]),
                float(row[5]), float(row[6]), int(nsrd), float(row[8]) if row[8] else None,
            ))
        except ValueError as exc:
            issues.append((no, str(exc)))
    if issues:
        raise DataValidationError(issues, rows)
    return rows


def format_feature_csv(rows: Iterable[FeatureVector]) -> str:
    out = [",".join(FEATURE_HEADER)]
    for r in rows:
        out.append(",".join([
            str(r.year), str(int(r.season)), _fmt(r.mst), _fmt(r.msdmt), _fmt(r.msdmt_min),
            _fmt(r.myt), _fmt(r.msr), str(r.nsrd), "" if r.mstny is None else _fmt(r.mstny),
        ]))
    return "\n".join(out) + "\n"


def read_feature_columns(content: bytes | str) -> tuple[dict[str, np.ndarray], np.ndarray | None, list[tuple[int, int]]]:
    """Lenient feature reader for prediction.

    Any subset of the feature columns is accepted as long as ``year`` and
    ``season_code`` are present. Returns variable columns, the target column
    (None when absent or incomplete) and the ``(year, season_code)`` keys.
    """
    text = _as_text(content)
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DataFormatError("missing header")
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    names = [n.strip() for n in reader.fieldnames or []]
    unknown = [n for n in names if n not in FEATURE_HEADER]
    if unknown or "year" not in names or "season_code" not in names:
        raise DataFormatError(f"bad feature header {','.join(names)!r}")
    raw = {n: [] for n in names}
    for row in reader:
        for n in names:
            raw[n].append((row.get(n) or "").strip())
    try:
        cols = {COLUMN_TO_VARIABLE[n]: np.array([float(v) for v in raw[n]]) for n in names if n in COLUMN_TO_VARIABLE}
        keys = [(int(y), int(s)) for y, s in zip(raw["year"], raw["season_code"])]
    except ValueError as exc:
        raise DataValidationError([(0, f"malformed number ({exc})")]) from None
    target = None
    if "mstny" in raw and raw["mstny"] and all(raw["mstny"]):
        target = np.array([float(v) for v in raw["mstny"]])
    return cols, target, keys


# -- aggregation ---------------------------------------------------------------


def monthly_from_daily(records: Sequence[DailyRecord], rainy_threshold_mm: float = DEFAULT_RAINY_THRESHOLD_MM) -> list[MonthlyRecord]:
    """Roll daily records of one station up to (year, month) records."""
    if not rainy_threshold_mm > 0:
        raise ValueError("rainy_threshold_mm must be positive")
    stations = {r.station_id for r in records}
    if len(stations) > 1:
        raise ValueError(f"mixed station ids: {sorted(stations)}")
    groups: dict[tuple[int, int], list[DailyRecord]] = defaultdict(list)
    for r in records:
        groups[(r.date.year, r.date.month)].append(r)
    out = []
    for (year, month), days in sorted(groups.items()):
        n_dates = len({d.date for d in days})
        if n_dates != len(days):
            raise ValueError(f"duplicate dates in {year}-{month:02d}")
        out.append(MonthlyRecord(
            station_id=days[0].station_id,
            year=year,
            month=month,
            tmin_mean_c=math.fsum(d.tmin_c for d in days) / len(days),
            tmax_mean_c=math.fsum(d.tmax_c for d in days) / len(days),
            tmean_c=math.fsum(d.tmean_c for d in days) / len(days),
            rain_total_mm=math.fsum(d.rain_mm for d in days),
            rainy_days=sum(d.rain_mm >= rainy_threshold_mm for d in days),
            days_present=len(days),
        ))
    return out


def _index(months: Iterable[MonthlyRecord]) -> dict[tuple[int, int], MonthlyRecord]:
    return {(m.year, m.month): m for m in months}


def _weighted(parts: list[MonthlyRecord], attr: str) -> float:
    total = sum(m.days_present for m in parts)
    return math.fsum(getattr(m, attr) * m.days_present for m in parts) / total


def seasonal_aggregate(
    months: Iterable[MonthlyRecord] | Mapping[tuple[int, int], MonthlyRecord],
    year: int,
    season: Season | int,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> SeasonalAggregate | None:
    """Aggregate one season; None when day coverage is below ``min_coverage``."""
    try:
        season = Season(season)
    except ValueError:
        raise ValueError(f"unknown season code {season!r}") from None
    if not 0 < min_coverage <= 1:
        raise ValueError("min_coverage must be in (0, 1]")
    idx = months if isinstance(months, Mapping) else _index(months)
    parts, possible = [], 0
    for month, dy in SEASON_MONTHS[season]:
        y = year + dy
        possible += calendar.monthrange(y, month)[1]
        m = idx.get((y, month))
        if m is not None and m.days_present > 0:
            parts.append(m)
    present = sum(m.days_present for m in parts)
    if present / possible < min_coverage:
        return None
    return SeasonalAggregate(
        mst=_weighted(parts, "tmean_c"),
        msdmt=_weighted(parts, "tmax_mean_c"),
        msdmt_min=_weighted(parts, "tmin_mean_c"),
        msr=math.fsum(m.rain_total_mm for m in parts),
        nsrd=sum(m.rainy_days for m in parts),
    )


def mean_yearly_temperature(
    months: Iterable[MonthlyRecord] | Mapping[tuple[int, int], MonthlyRecord],
    year: int,
    min_coverage: float = DEFAULT_MIN_COVERAGE,
) -> float | None:
    idx = months if isinstance(months, Mapping) else _index(months)
    parts = [idx[(year, m)] for m in range(1, 13) if (year, m) in idx and idx[(year, m)].days_present > 0]
    possible = 366 if calendar.isleap(year) else 365
    if not parts or sum(m.days_present for m in parts) / possible < min_coverage:
        return None
    return _weighted(parts, "tmean_c")


@dataclass
class StationAggregates:
    """Per-station seasonal and yearly aggregates plus the periods that were missing."""

    station_id: str
    seasonal: dict[tuple[int, Season], SeasonalAggregate] = field(default_factory=dict)
    yearly: dict[int, float] = field(default_factory=dict)
    missing_seasons: list[tuple[int, Season]] = field(default_factory=list)
    missing_years: list[int] = field(default_factory=list)


def aggregate_station(months: Sequence[MonthlyRecord], min_coverage: float = DEFAULT_MIN_COVERAGE) -> StationAggregates:
    stations = {m.station_id for m in months}
    if len(stations) != 1:
        raise ValueError(f"expected one station, got {sorted(stations)}")
    idx = _index(months)
    years = [y for y, _ in idx]
    first, last = min(years), max(years)
    agg = StationAggregates(next(iter(stations)))
    slots = [(y, s) for y in range(first, last + 1) for s in Season]
    if (last, 12) in idx:
        # December of the last year opens the following winter
        slots.append((last + 1, Season.WINTER))
    for year in range(first, last + 1):
        myt = mean_yearly_temperature(idx, year, min_coverage)
        if myt is None:
            agg.missing_years.append(year)
        else:
            agg.yearly[year] = myt
    for year, season in slots:
        a = seasonal_aggregate(idx, year, season, min_coverage)
        if a is None:
            agg.missing_seasons.append((year, season))
        else:
            agg.seasonal[(year, season)] = a
    return agg


# -- station harmonization -------------------------------------------------------


@dataclass(frozen=True)
class StationOffset:
    """Additive per-season, per-variable corrections for one station."""

    deltas: Mapping[tuple[Season, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for (season, var), d in self.deltas.items():
            Season(season)
            if var not in OFFSET_VARIABLES:
                raise ValueError(f"unknown offset variable {var!r}")
            if var == "nsrd" and d != int(d):
                raise ValueError("nsrd offsets must be whole days")

    def get(self, season: Season, var: str) -> float:
        return self.deltas.get((Season(season), var), 0.0)

    def negated(self) -> "StationOffset":
        return StationOffset({k: -v for k, v in self.deltas.items()})


def apply_offset(agg: SeasonalAggregate, season: Season, offset: StationOffset) -> SeasonalAggregate:
    return SeasonalAggregate(
        mst=agg.mst + offset.get(season, "mst"),
        msdmt=agg.msdmt + offset.get(season, "msdmt"),
        msdmt_min=agg.msdmt_min + offset.get(season, "msdmt_min"),
        msr=agg.msr + offset.get(season, "msr"),
        nsrd=agg.nsrd + int(offset.get(season, "nsrd")),
    )


def offset_features(rows: Iterable[FeatureVector], offset: StationOffset) -> list[FeatureVector]:
    """Shift already-built feature vectors (target included) by ``offset``."""
    out = []
    for r in rows:
        out.append(replace(
            r,
            mst=r.mst + offset.get(r.season, "mst"),
            msdmt=r.msdmt + offset.get(r.season, "msdmt"),
            msdmt_min=r.msdmt_min + offset.get(r.season, "msdmt_min"),
            myt=r.myt + offset.get(r.season, "myt"),
            msr=r.msr + offset.get(r.season, "msr"),
            nsrd=r.nsrd + int(offset.get(r.season, "nsrd")),
            mstny=None if r.mstny is None else r.mstny + offset.get(r.season, "mst"),
        ))
    return out


def parse_offsets_csv(content: bytes | str) -> dict[str, StationOffset]:
    deltas: dict[str, dict] = defaultdict(dict)
    issues = []
    for no, row in _reader(content, OFFSET_HEADER):
        if len(row) != 4:
            issues.append((no, "expected 4 fields"))
            continue
        try:
            season = Season(int(row[1]))
            if row[2] not in OFFSET_VARIABLES:
                raise ValueError(f"unknown variable {row[2]!r}")
            deltas[row[0]][(season, row[2])] = float(row[3])
        except ValueError as exc:
            issues.append((no, str(exc)))
    if issues:
        raise DataValidationError(issues)
    try:
        return {sid: StationOffset(d) for sid, d in deltas.items()}
    except ValueError as exc:
        raise DataValidationError([(0, str(exc))]) from None


# -- dataset ---------------------------------------------------------------------


class StationConflictError(ValueError):
    def __init__(self, keys: list[tuple[int, Season]]):
        self.keys = keys
        listed = ", ".join(f"{y}/{s.label}" for y, s in keys[:10])
        super().__init__(f"{len(keys)} (year, season) key(s) supplied by more than one station: {listed}")


def build_dataset(
    stations: Mapping[str, StationAggregates] | Sequence[StationAggregates],
    offsets: Mapping[str, StationOffset] | None = None,
) -> list[FeatureVector]:
    """Join station aggregates into labelled feature vectors.

    A vector for (Y, S) is emitted only when all eight inputs exist for
    (Y, S) and MST exists for (Y + 1, S). MYT comes from the same station as
    the seasonal inputs. Offsets are applied per station before joining.
    """
    if not isinstance(stations, Mapping):
        stations = {s.station_id: s for s in stations}
    offsets = offsets or {}
    merged: dict[tuple[int, Season], tuple[SeasonalAggregate, float | None]] = {}
    owner: dict[tuple[int, Season], str] = {}
    conflicts = []
    for sid in sorted(stations):
        st = stations[sid]
        off = offsets.get(sid, StationOffset())
        for (year, season), agg in st.seasonal.items():
            key = (year, Season(season))
            if key in owner:
                conflicts.append(key)
                continue
            owner[key] = sid
            myt = st.yearly.get(year)
            if myt is not None:
                myt = myt + off.get(season, "myt")
            merged[key] = (apply_offset(agg, season, off), myt)
    if conflicts:
        raise StationConflictError(sorted(set(conflicts)))
    rows = []
    for (year, season) in sorted(merged):
        agg, myt = merged[(year, season)]
        nxt = merged.get((year + 1, season))
        if myt is None or nxt is None:
            continue
        rows.append(FeatureVector(year, season, agg.mst, agg.msdmt, agg.msdmt_min, myt, agg.msr, agg.nsrd, nxt[0].mst))
    return rows


# -- folds -------------------------------------------------------------------------


def kfold_split(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` near-equal folds."""
    if not 1 < k <= n:
        raise ValueError(f"need 1 < k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]
