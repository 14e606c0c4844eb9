"""Grid load series, peak-window search, event templates and baselines."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from .domain import ConfigError, EventSpec, EventStep, GridflexError


class SeriesError(GridflexError):
    pass


class ParseError(SeriesError):
    pass


class NonUniformCadence(SeriesError):
    pass


class NonMonotoneTime(SeriesError):
    pass


class WindowTooLong(SeriesError):
    pass


class InsufficientHistory(SeriesError):
    pass


class InvalidParams(ConfigError):
    pass


class SeriesKind(str, enum.Enum):
    FORECAST = "forecast"
    ACTUAL = "actual"


@dataclass
class LoadSeries:
    timestamps: list[datetime]
    mw: np.ndarray
    kind: SeriesKind = SeriesKind.ACTUAL

    def __post_init__(self):
        self.mw = np.asarray(self.mw, dtype=float)
        if len(self.timestamps) != len(self.mw):
            raise ParseError("timestamps and values differ in length")
        _check_times(self.timestamps)
        if np.any(self.mw < 0):
            raise ParseError("load values must be >= 0")

    def __len__(self) -> int:
        return len(self.mw)

    @property
    def cadence(self) -> float:
        if len(self.timestamps) < 2:
            return 0.0
        return (self.timestamps[1] - self.timestamps[0]).total_seconds()

    @property
    def span(self) -> float:
        return len(self) * self.cadence


def _check_times(ts: Sequence[datetime]) -> None:
    steps = [(b - a).total_seconds() for a, b in zip(ts, ts[1:])]
    if any(s <= 0 for s in steps):
        raise NonMonotoneTime("timestamps must strictly increase")
    if steps and any(s != steps[0] for s in steps):
        raise NonUniformCadence("timestamps are not evenly spaced")


@dataclass(frozen=True)
class PeakWindow:
    start: datetime
    duration: float
    avg_load: float
    start_index: int


def load_series(path, format: str = "csv", kind: SeriesKind = SeriesKind.ACTUAL) -> LoadSeries:
    """Read a ``timestamp,mw`` CSV with ISO-8601 timestamps."""
    if format != "csv":
        raise ParseError(f"unsupported load series format {format!r}")
    timestamps, values = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"timestamp", "mw"} - set(reader.fieldnames):
            raise ParseError(f"{path}: expected header 'timestamp,mw'")
        for lineno, row in enumerate(reader, start=2):
            try:
                timestamps.append(datetime.fromisoformat(row["timestamp"].strip()))
                values.append(float(row["mw"]))
            except (ValueError, AttributeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not values:
        raise ParseError(f"{path}: no data rows")
    return LoadSeries(timestamps, np.array(values), SeriesKind(kind))


def write_series(series: LoadSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp,mw\n")
        for t, v in zip(series.timestamps, series.mw):
            fh.write(f"{t.isoformat()},{v:.6g}\n")


def find_peak_window(series: LoadSeries, duration: float) -> PeakWindow:
    """Contiguous window of ``duration`` seconds with the highest mean load.

    Ties go to the earliest start. Near-ties from the prefix-sum pass are
    re-scored with exact summation so rounding cannot reorder them.
    """
    if len(series) < 2:
        raise SeriesError("a series needs two or more samples to define its cadence")
    cadence = series.cadence
    w = int(round(duration / cadence))
    if w < 1 or w > len(series):
        raise WindowTooLong(f"window of {duration} s does not fit a {series.span} s series")
    csum = np.concatenate([[0.0], np.cumsum(series.mw)])
    sums = csum[w:] - csum[:-w]
    best = sums.max()
    slack = 1e-9 * max(1.0, abs(best))
    close = np.flatnonzero(sums >= best - slack)
    exact = [math.fsum(series.mw[i : i + w]) for i in close]
    top = max(exact)
    start = int(close[exact.index(top)])
    return PeakWindow(series.timestamps[start], w * cadence, top / w, start)


class EventTemplate(str, enum.Enum):
    PEAK_SHAVE = "peak_shave"
    TWO_STEP_EMERGENCY = "two_step_emergency"


def make_event(template, baseline_watts: float, **params) -> EventSpec:
    """Instantiate an event from a template.

    peak_shave: ``reduction`` (0.25), ``ramp`` (900 s), ``hold`` (10800 s).
    two_step_emergency: ``first_reduction`` (0.15), ``second_reduction``
    (0.10, added to the first), ``ramp`` (900 s), ``first_hold`` (3600 s),
    ``second_hold`` (7200 s), ``second_ramp`` (defaults to ``ramp``).
    Both accept ``recovery_ramp`` (defaults to ``ramp``), ``snapback_window``
    (3600 s) and ``snapback_margin`` (0.0): the post-event target sits this
    fraction below baseline.
    """
    template = EventTemplate(template)
    p = dict(params)

    def take(name, default):
        value = p.pop(name, default)
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise InvalidParams(f"{name} must be a number, got {value!r}") from None
        if value < 0:
            raise InvalidParams(f"{name} must be >= 0")
        return value

    if template is EventTemplate.PEAK_SHAVE:
        reduction = take("reduction", 0.25)
        ramp = take("ramp", 900.0)
        steps = [EventStep(reduction, ramp, take("hold", 10800.0))]
    else:
        first = take("first_reduction", 0.15)
        second = take("second_reduction", 0.10)
        ramp = take("ramp", 900.0)
        steps = [
            EventStep(first, ramp, take("first_hold", 3600.0)),
            EventStep(first + second, take("second_ramp", ramp), take("second_hold", 7200.0)),
        ]
    recovery = take("recovery_ramp", ramp)
    window = take("snapback_window", 3600.0)
    margin = take("snapback_margin", 0.0)
    if p:
        raise InvalidParams(f"unknown parameters for {template.value}: {sorted(p)}")
    if any(s.target_reduction_fraction > 1 for s in steps) or margin >= 1:
        raise InvalidParams("reductions must not exceed 100%")
    try:
        return EventSpec(
            baseline_watts=float(baseline_watts),
            steps=tuple(steps),
            recovery_ramp=recovery,
            snapback_window=window,
            snapback_limit_watts=float(baseline_watts) * (1.0 - margin),
        )
    except ConfigError as exc:
        raise InvalidParams(str(exc)) from None


def compute_baseline(times, watts, event_start: float, lookback: float = 3600.0) -> float:
    """Mean power over ``[event_start - lookback, event_start)``.

    ``times`` are sample start times in seconds (or datetimes, with
    ``event_start`` of the same type).
    """
    times = list(times)
    watts = np.asarray(watts, dtype=float)
    if times and isinstance(times[0], datetime):
        origin = times[0]
        times = [(t - origin).total_seconds() for t in times]
        event_start = (event_start - origin).total_seconds()
    lo = event_start - lookback
    if not times or times[0] > lo + 1e-9:
        raise InsufficientHistory(f"need history from t={lo}, series starts at {times[0] if times else None}")
    mask = [(lo - 1e-9 <= t < event_start - 1e-9) for t in times]
    sel = watts[np.array(mask, dtype=bool)]
    if len(sel) == 0:
        raise InsufficientHistory("no samples inside the lookback window")
    return float(np.mean(sel))


def synthetic_hot_day(
    day: datetime = datetime(2025, 5, 1),
    cadence_minutes: int = 5,
    base_mw: float = 4200.0,
    peak_mw: float = 7400.0,
    peak_hour: float = 17.5,
    width_hours: float = 3.5,
    noise_mw: float = 0.0,
    seed: Optional[int] = None,
) -> LoadSeries:
    """Smooth one-day system load with an evening air-conditioning peak (synthetic)."""
    n = 24 * 60 // cadence_minutes
    hours = np.arange(n) * cadence_minutes / 60.0
    shape = np.exp(-0.5 * ((hours - peak_hour) / width_hours) ** 2)
    morning = 0.08 * np.exp(-0.5 * ((hours - 8.0) / 2.0) ** 2)
    mw = base_mw + (peak_mw - base_mw) * (shape + morning)
    if noise_mw:
        mw = mw + np.random.default_rng(seed).normal(0.0, noise_mw, n)
    stamps = [day + timedelta(minutes=cadence_minutes * i) for i in range(n)]
    return LoadSeries(stamps, np.maximum(mw, 0.0), SeriesKind.FORECAST)
