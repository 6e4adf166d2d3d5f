"""Market data ingestion, feature construction and historical-simulation P&L.

Series are stored as float arrays aligned to a strictly increasing array of
``datetime64[D]`` dates. Unavailable entries (warm-up periods of rolling
transforms) are NaN; ``build_features`` drops every row that still has one.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError

ZERO_STD = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def _as_date(value) -> np.datetime64:
    return np.datetime64(value, "D")


@dataclass(frozen=True)
class TimeSeriesPanel:
    """Date-aligned named series of market levels."""

    dates: np.ndarray
    series: Mapping[str, np.ndarray]

    def __post_init__(self):
        dates = np.asarray(self.dates).astype("datetime64[D]")
        if dates.ndim != 1:
            raise DataError("dates must be one-dimensional")
        if dates.size > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DataError("dates must be strictly increasing without duplicates")
        cleaned = {}
        for name, values in self.series.items():
            v = np.asarray(values, dtype=float)
            if v.shape != dates.shape:
                raise DataError(f"series {name!r} has {v.size} values for {dates.size} dates")
            if not np.all(np.isfinite(v)):
                raise DataError(f"series {name!r} contains non-finite values")
            cleaned[name] = _readonly(v)
        object.__setattr__(self, "dates", _readonly(dates))
        object.__setattr__(self, "series", dict(cleaned))

    def __len__(self) -> int:
        return int(self.dates.size)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.series[name]
        except KeyError:
            raise DataError(f"unknown series {name!r}; have {sorted(self.series)}") from None

    @property
    def names(self) -> list[str]:
        return list(self.series)

    def index_of(self, date) -> int:
        d = _as_date(date)
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self) or self.dates[i] != d:
            raise DataError(f"date {d} not in panel")
        return i

    def slice(self, start: int, stop: int) -> "TimeSeriesPanel":
        return TimeSeriesPanel(self.dates[start:stop],
                               {k: v[start:stop] for k, v in self.series.items()})

    def with_series(self, name: str, values: np.ndarray) -> "TimeSeriesPanel":
        if name in self.series:
            raise DataError(f"series {name!r} already present")
        return TimeSeriesPanel(self.dates, {**self.series, name: values})

    def to_csv(self, path, date_column: str = "date") -> None:
        names = self.names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([date_column, *names])
            for i, d in enumerate(self.dates):
                w.writerow([str(d), *(repr(float(self.series[n][i])) for n in names)])


@dataclass(frozen=True)
class FeatureMatrix:
    dates: np.ndarray
    x: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2 or x.shape[0] != len(self.dates) or x.shape[1] != len(self.feature_names):
            raise DataError("feature matrix shape does not match dates/feature names")
        if not np.all(np.isfinite(x)):
            raise DataError("feature matrix contains unavailable entries")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "dates", _readonly(np.asarray(self.dates).astype("datetime64[D]")))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def row_for(self, date) -> np.ndarray:
        d = _as_date(date)
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self) or self.dates[i] != d:
            raise DataError(f"no feature row for {d}")
        return self.x[i]


@dataclass(frozen=True)
class HistRetVector:
    """Historical-simulation P&L; ``pnl[i - 1]`` uses moves from t-D-i to t-i."""

    asof_date: np.datetime64
    horizon: int
    pnl: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pnl", _readonly(np.asarray(self.pnl, dtype=float)))

    def __len__(self) -> int:
        return int(self.pnl.size)


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def load_panel(path, schema: Mapping | None = None) -> TimeSeriesPanel:
    """Read a CSV of levels into a panel.

    ``schema`` may contain ``date_column`` (default ``"date"``) and
    ``columns`` (default: every other column). Rows are sorted by date;
    exact duplicate rows are dropped, conflicting duplicates are an error.
    """
    schema = dict(schema or {})
    date_col = schema.get("date_column", "date")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if date_col not in header:
            raise DataError(f"{path}: missing date column {date_col!r}")
        columns = list(schema.get("columns") or [c for c in header if c != date_col])
        if not columns:
            raise DataError(f"{path}: no value columns")
        missing = [c for c in columns if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        rows: dict[np.datetime64, tuple[float, ...]] = {}
        problems = []
        for lineno, row in enumerate(reader, start=2):
            raw_date = (row.get(date_col) or "").strip()
            try:
                d = np.datetime64(dt.date.fromisoformat(raw_date), "D")
            except ValueError:
                problems.append(f"line {lineno}: bad date {raw_date!r}")
                continue
            vals = []
            for c in columns:
                cell = (row.get(c) or "").strip()
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    problems.append(f"line {lineno} ({raw_date}): bad value {cell!r} in column {c!r}")
                vals.append(v)
            if d in rows and rows[d] != tuple(vals):
                problems.append(f"line {lineno}: duplicate date {raw_date} with conflicting values")
            rows[d] = tuple(vals)
    if problems:
        raise DataError(f"{path}: rejected rows:\n  " + "\n  ".join(problems))
    if not rows:
        raise DataError(f"{path}: no data rows")
    dates = np.array(sorted(rows), dtype="datetime64[D]")
    table = np.array([rows[d] for d in dates], dtype=float)
    return TimeSeriesPanel(dates, {c: table[:, j] for j, c in enumerate(columns)})


def align_intersection(panels: Sequence[TimeSeriesPanel]) -> TimeSeriesPanel:
    if not panels:
        raise DataError("need at least one panel")
    seen: set[str] = set()
    for p in panels:
        clash = seen.intersection(p.series)
        if clash:
            raise DataError(f"series name collision: {sorted(clash)}")
        seen.update(p.series)
    common = panels[0].dates
    for p in panels[1:]:
        common = np.intersect1d(common, p.dates)
    if common.size == 0:
        raise DataError("panels share no dates")
    merged = {}
    for p in panels:
        idx = np.searchsorted(p.dates, common)
        for name, v in p.series.items():
            merged[name] = v[idx]
    return TimeSeriesPanel(common, merged)


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

def _changes(v: np.ndarray, lag: int, mode: str) -> np.ndarray:
    out = np.full(v.shape, np.nan)
    if mode == "difference":
        out[lag:] = v[lag:] - v[:-lag]
    elif mode == "relative":
        base = v[:-lag]
        if np.any(base == 0.0):
            raise DataError("zero level in relative change denominator")
        out[lag:] = v[lag:] / base - 1.0
    else:
        raise ValueError(f"unknown change mode {mode!r}")
    return out


def change_series(panel: TimeSeriesPanel, name: str, lag: int, mode: str = "difference") -> np.ndarray:
    """``v[t] - v[t-lag]`` or ``v[t]/v[t-lag] - 1``; the first ``lag`` entries are NaN."""
    v = panel[name]
    if lag < 1 or lag >= v.size:
        raise ValueError(f"lag must be in [1, {v.size - 1}], got {lag}")
    return _changes(v, lag, mode)


def _rolling_std(values: np.ndarray, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    out = np.full(v.shape, np.nan)
    if v.size >= window:
        out[window - 1:] = sliding_window_view(v, window).std(axis=1, ddof=1)
    return out


def rolling_zscore(values, window: int) -> np.ndarray:
    """Z-score against the trailing window that includes the current point.

    Sample std (ddof=1). A window whose std is below 1e-12 yields 0.
    Entries without a full window of finite history are NaN.
    """
    if window < 2:
        raise ValueError("z-score window must be at least 2")
    v = np.asarray(values, dtype=float)
    out = np.full(v.shape, np.nan)
    if v.size < window:
        return out
    win = sliding_window_view(v, window)
    mean = win.mean(axis=1)
    std = win.std(axis=1, ddof=1)
    cur = v[window - 1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(std < ZERO_STD, 0.0, (cur - mean) / std)
    z[~np.isfinite(mean)] = np.nan
    out[window - 1:] = z
    return out


def rolling_std_diff(values, short_window: int, long_window: int, mode: str = "difference") -> np.ndarray:
    """Short-window std of one-step changes minus long-window std of the same."""
    if short_window < 2 or short_window >= long_window:
        raise ValueError("need 2 <= short_window < long_window")
    v = np.asarray(values, dtype=float)
    if v.size <= long_window:
        raise DataError(f"need more than {long_window} values, got {v.size}")
    ch = _changes(v, 1, mode)
    return _rolling_std(ch, short_window) - _rolling_std(ch, long_window)


def rolling_mean_gap(values, short_window: int, long_window: int, mode: str = "relative") -> np.ndarray:
    """Recent short-window average relative to the long-window average."""
    if short_window < 1 or short_window >= long_window:
        raise ValueError("need 1 <= short_window < long_window")
    v = np.asarray(values, dtype=float)
    out = np.full(v.shape, np.nan)
    if v.size < long_window:
        return out
    short = sliding_window_view(v, short_window).mean(axis=1)[long_window - short_window:]
    long = sliding_window_view(v, long_window).mean(axis=1)
    out[long_window - 1:] = short / long - 1.0 if mode == "relative" else short - long
    return out


TRANSFORMS = ("change", "std_diff", "rolling_std", "mean_gap", "level")


@dataclass(frozen=True)
class FeatureSpec:
    """One feature column.

    transform: ``change`` (lag, mode), ``std_diff`` (short, long, mode),
    ``rolling_std`` (window, mode), ``mean_gap`` (short, long, mode) or
    ``level``. ``zscore_window`` optionally z-scores the result.
    """

    name: str
    series: str
    transform: str
    lag: int = 1
    mode: str = "difference"
    short: int = 5
    long: int = 250
    window: int = 5
    zscore_window: int | None = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"feature {self.name!r}: unknown transform {self.transform!r}; "
                             f"expected one of {TRANSFORMS}")
        if self.mode not in ("difference", "relative"):
            raise ValueError(f"feature {self.name!r}: unknown mode {self.mode!r}")
        for k in ("lag", "short", "long", "window"):
            v = getattr(self, k)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"feature {self.name!r}: {k} must be a positive integer")
        if self.zscore_window is not None and (not isinstance(self.zscore_window, int) or self.zscore_window < 2):
            raise ValueError(f"feature {self.name!r}: zscore_window must be an integer >= 2")

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown feature keys {sorted(extra)}")
        d = dict(d)
        d.setdefault("name", f"{d.get('series')}_{d.get('transform')}")
        return cls(**d)


def feature_column(panel: TimeSeriesPanel, spec: FeatureSpec) -> np.ndarray:
    if spec.series not in panel.series:
        raise DataError(f"feature {spec.name!r} references unknown series {spec.series!r}")
    v = panel[spec.series]
    if spec.transform == "change":
        col = change_series(panel, spec.series, spec.lag, spec.mode)
    elif spec.transform == "std_diff":
        col = rolling_std_diff(v, spec.short, spec.long, spec.mode)
    elif spec.transform == "rolling_std":
        col = _rolling_std(_changes(v, 1, spec.mode), spec.window)
    elif spec.transform == "mean_gap":
        col = rolling_mean_gap(v, spec.short, spec.long, spec.mode)
    elif spec.transform == "level":
        col = v.astype(float)
    else:
        raise ValueError(f"unknown transform {spec.transform!r}; expected one of {TRANSFORMS}")
    if spec.zscore_window:
        col = rolling_zscore(col, spec.zscore_window)
    return col


def build_features(panel: TimeSeriesPanel, specs: Sequence[FeatureSpec]) -> FeatureMatrix:
    if not specs:
        raise ValueError("feature spec is empty")
    cols = np.column_stack([feature_column(panel, s) for s in specs])
    ok = np.all(np.isfinite(cols), axis=1)
    if not ok.any():
        raise DataError("no date has every feature available")
    return FeatureMatrix(panel.dates[ok], cols[ok], tuple(s.name for s in specs))


# --------------------------------------------------------------------------
# portfolio and historical simulation
# --------------------------------------------------------------------------

class RelativeReturn:
    """Position marked by relative level change (equities, FX)."""

    def pnl(self, start, end):
        return np.asarray(end) / np.asarray(start) - 1.0

    def value_path(self, levels: np.ndarray, anchor: float) -> np.ndarray:
        return levels / anchor

    def __repr__(self):
        return "RelativeReturn()"


@dataclass(frozen=True)
class BondReturn:
    """Duration approximation: return = -duration * yield change.

    ``yield_scale`` converts quoted yield units to decimals (0.01 for
    yields quoted in percent). The default duration is a config value for a
    ten-year note, not an estimate.
    """

    duration: float = 8.5
    yield_scale: float = 0.01

    def pnl(self, start, end):
        return -self.duration * self.yield_scale * (np.asarray(end) - np.asarray(start))

    def value_path(self, levels: np.ndarray, anchor: float) -> np.ndarray:
        return 1.0 - self.duration * self.yield_scale * (levels - anchor)


@dataclass(frozen=True)
class LinearReturn:
    """Return proportional to the level difference (e.g. spread products)."""

    scale: float = 1.0

    def pnl(self, start, end):
        return self.scale * (np.asarray(end) - np.asarray(start))

    def value_path(self, levels: np.ndarray, anchor: float) -> np.ndarray:
        return self.scale * (levels - anchor)


RULES = {"relative": RelativeReturn, "bond": BondReturn, "linear": LinearReturn}


@dataclass(frozen=True)
class Position:
    series: str
    weight: float
    rule: object = field(default_factory=RelativeReturn)


@dataclass(frozen=True)
class Portfolio:
    positions: tuple[Position, ...]

    @classmethod
    def from_dict(cls, d: Mapping[str, Mapping]) -> "Portfolio":
        positions = []
        for name, spec in d.items():
            spec = dict(spec)
            weight = float(spec.pop("weight"))
            rule_name = spec.pop("rule", "relative")
            if rule_name not in RULES:
                raise ValueError(f"unknown return rule {rule_name!r}")
            positions.append(Position(name, weight, RULES[rule_name](**spec)))
        if not positions:
            raise ValueError("portfolio has no positions")
        return cls(tuple(positions))

    @property
    def series(self) -> list[str]:
        return [p.series for p in self.positions]

    def check(self, panel: TimeSeriesPanel) -> None:
        missing = [s for s in self.series if s not in panel.series]
        if missing:
            raise DataError(f"portfolio references unknown series {missing}")

    def pnl(self, panel: TimeSeriesPanel, start_idx, end_idx) -> np.ndarray:
        """Portfolio return for moves between two (arrays of) date indices."""
        total = 0.0
        for p in self.positions:
            v = panel[p.series]
            total = total + p.weight * p.rule.pnl(v[start_idx], v[end_idx])
        return np.asarray(total, dtype=float)

    def value_path(self, panel: TimeSeriesPanel, anchor_idx: int) -> np.ndarray:
        """Value of the holdings fixed at ``anchor_idx`` along the whole panel.

        Differences of this path are the P&L of the anchor-date holdings.
        """
        self.check(panel)
        path = np.zeros(len(panel))
        for p in self.positions:
            v = panel[p.series]
            path += p.weight * p.rule.value_path(v, v[anchor_idx])
        return path

    def index_path(self, panel: TimeSeriesPanel) -> np.ndarray:
        """Daily-rebalanced portfolio index starting at 1."""
        self.check(panel)
        idx = np.arange(len(panel))
        r = np.zeros(len(panel))
        r[1:] = self.pnl(panel, idx[:-1], idx[1:])
        return np.cumprod(1.0 + r)


def simulate_hist_returns(panel: TimeSeriesPanel, portfolio: Portfolio, D: int, T: int, asof) -> HistRetVector:
    """Historical-simulation vector of the current portfolio at ``asof``.

    ``asof`` is a date or an integer index into the panel.
    """
    if D < 1 or T < 1:
        raise ValueError("D and T must be positive")
    portfolio.check(panel)
    t = asof if isinstance(asof, (int, np.integer)) else panel.index_of(asof)
    if t - D - T < 0:
        raise DataError(f"need {T + D} dates before asof, have {t}")
    i = np.arange(1, T + 1)
    pnl = portfolio.pnl(panel, t - D - i, t - i)
    return HistRetVector(panel.dates[t], D, pnl)


def iter_dates(dates: Iterable) -> list[str]:
    return [str(np.datetime64(d, "D")) for d in dates]
