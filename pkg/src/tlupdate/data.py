"""Time-series ingestion, min-max scaling, batch slicing and a synthetic plant generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

SECONDS_PER_DAY = 86400

INPUT_NAMES = (
    "Flue Gas Inlet Temperature",
    "Flue Gas Outlet Temperature",
    "Secondary Air Inlet Temperature",
    "Secondary Air Outlet Temperature",
    "Primary Air Inlet Temperature",
    "Primary Air Outlet Temperature",
    "Oxygen Inlet",
    "Oxygen Outlet",
)
TARGET_NAME = "Flue Gas DP"
TIMESTAMP_NAME = "Timestamp"


class DataError(ValueError):
    """Base class for ingestion and slicing failures."""


class SchemaError(DataError):
    pass


class IngestionError(DataError):
    pass


class OrderingError(DataError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    input_names: tuple[str, ...]
    target_name: str
    timestamp_name: str = TIMESTAMP_NAME

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_names", tuple(self.input_names))
        if not self.input_names:
            raise SchemaError("schema needs at least one input")
        if len(set(self.input_names)) != len(self.input_names):
            raise SchemaError("input names must be unique")
        if self.target_name in self.input_names:
            raise SchemaError(f"target {self.target_name!r} listed among inputs")

    @property
    def columns(self) -> tuple[str, ...]:
        return self.input_names + (self.target_name,)

    def to_dict(self) -> dict:
        return {
            "input_names": list(self.input_names),
            "target_name": self.target_name,
            "timestamp_name": self.timestamp_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(tuple(d["input_names"]), d["target_name"], d.get("timestamp_name", TIMESTAMP_NAME))


PLANT_SCHEMA = FeatureSchema(INPUT_NAMES, TARGET_NAME)


@dataclass(frozen=True)
class Dataset:
    """Multivariate time series; ``rows`` holds the inputs followed by the target."""

    schema: FeatureSchema
    timestamps: np.ndarray  # datetime64[s], UTC
    rows: np.ndarray
    sampling_interval: float  # seconds

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != len(self.schema.columns):
            raise SchemaError(f"rows must have {len(self.schema.columns)} columns, got shape {rows.shape}")
        if len(ts) != len(rows):
            raise DataError("row count differs from timestamp count")
        if len(ts) > 1 and not np.all(np.diff(ts.astype(np.int64)) > 0):
            raise OrderingError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def inputs(self) -> np.ndarray:
        return self.rows[:, :-1]

    @property
    def target(self) -> np.ndarray:
        return self.rows[:, -1]

    @property
    def dates(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    def slice(self, start: int, end: int) -> "Dataset":
        return replace(self, timestamps=self.timestamps[start:end], rows=self.rows[start:end])

    def take(self, index: np.ndarray) -> "Dataset":
        index = np.sort(np.asarray(index))
        return replace(self, timestamps=self.timestamps[index], rows=self.rows[index])

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=list(self.schema.columns))
        stamps = pd.to_datetime(self.timestamps).strftime("%Y-%m-%dT%H:%M:%SZ")
        df.insert(0, self.schema.timestamp_name, stamps)
        return df


def _median_interval(ts: np.ndarray) -> float:
    if len(ts) < 2:
        return 0.0
    return float(np.median(np.diff(ts.astype(np.int64))))


def load_csv(path: str | Path, schema: FeatureSchema) -> Dataset:
    """Read a CSV time series with ISO-8601 UTC timestamps.

    Rows must already be in ascending time order; the sampling interval is
    the median gap between consecutive timestamps.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in (schema.timestamp_name, *schema.columns) if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")

    try:
        stamps = pd.to_datetime(df[schema.timestamp_name], utc=True, format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise IngestionError(f"{path}: unparsable timestamp ({exc})") from None
    ts = stamps.dt.tz_convert(None).to_numpy().astype("datetime64[s]")

    values = np.empty((len(df), len(schema.columns)))
    for j, name in enumerate(schema.columns):
        col = np.array([_parse_float(v) for v in df[name]])
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            # +2: one for the header, one for 1-based line numbers
            raise IngestionError(f"{path}: row {bad[0] + 2} column {name!r}: bad value {df[name].iloc[bad[0]]!r}")
        values[:, j] = col

    if len(ts) > 1:
        gaps = np.diff(ts.astype(np.int64))
        if np.any(gaps <= 0):
            i = int(np.flatnonzero(gaps <= 0)[0])
            raise OrderingError(f"{path}: timestamp at row {i + 3} is not after row {i + 2}")
    return Dataset(schema, ts, values, _median_interval(ts))


def _parse_float(text: str) -> float:
    # float() is correctly rounded, unlike pandas' fast parser
    try:
        return float(text)
    except ValueError:
        return float("nan")


def save_csv(data: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path


@dataclass(frozen=True)
class Scaler:
    mins: np.ndarray
    maxs: np.ndarray
    fitted_on: tuple[str, ...]

    def __post_init__(self) -> None:
        mins = np.asarray(self.mins, dtype=float)
        maxs = np.asarray(self.maxs, dtype=float)
        if np.any(maxs < mins):
            raise ValueError("scaler max must be >= min")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        object.__setattr__(self, "fitted_on", tuple(self.fitted_on))

    def _index(self, columns: Sequence[str]) -> np.ndarray:
        unseen = [c for c in columns if c not in self.fitted_on]
        if unseen:
            raise ValueError(f"scaler was not fitted on {unseen}")
        return np.array([self.fitted_on.index(c) for c in columns], dtype=int)

    def transform(self, values: np.ndarray, columns: Sequence[str] | None = None) -> np.ndarray:
        idx = self._index(columns if columns is not None else self.fitted_on)
        lo, hi = self.mins[idx], self.maxs[idx]
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        out = (np.asarray(values, dtype=float) - lo) / safe
        return np.where(span > 0, out, 0.0)

    def inverse_transform(self, values: np.ndarray, columns: Sequence[str] | None = None) -> np.ndarray:
        idx = self._index(columns if columns is not None else self.fitted_on)
        lo, hi = self.mins[idx], self.maxs[idx]
        return np.asarray(values, dtype=float) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {
            "columns": list(self.fitted_on),
            "min": [format(v, ".17g") for v in self.mins],
            "max": [format(v, ".17g") for v in self.maxs],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scaler":
        return cls(np.array([float(v) for v in d["min"]]), np.array([float(v) for v in d["max"]]), d["columns"])


def fit_scaler(data: Dataset, columns: Sequence[str] | None = None) -> Scaler:
    if len(data) == 0:
        raise DataError("cannot fit a scaler on empty data")
    columns = tuple(columns) if columns is not None else data.schema.columns
    idx = [data.schema.columns.index(c) for c in columns]
    block = data.rows[:, idx]
    return Scaler(block.min(axis=0), block.max(axis=0), columns)


def apply_scaler(scaler: Scaler, data: Dataset) -> Dataset:
    """Min-max normalize every column of ``data``; values outside the fitted range are not clipped."""
    return replace(data, rows=scaler.transform(data.rows, data.schema.columns))


@dataclass(frozen=True)
class Batch:
    index: int
    start: int
    end: int  # exclusive
    batch_days: float
    window_start: np.datetime64
    partial: bool = False

    def __len__(self) -> int:
        return self.end - self.start

    @property
    def window_end(self) -> np.datetime64:
        return self.window_start + np.timedelta64(int(round(self.batch_days * SECONDS_PER_DAY)), "s")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "start": self.start,
            "end": self.end,
            "batch_days": self.batch_days,
            "window_start": str(self.window_start),
            "partial": self.partial,
        }


def make_batches(data: Dataset, batch_days: float) -> list[Batch]:
    """Cut ``data`` into contiguous windows of ``batch_days`` aligned to the first UTC midnight.

    A batch whose window is not fully covered by data (typically the trailing
    one) is kept and flagged ``partial``. Windows that contain no rows are skipped.
    """
    if batch_days <= 0:
        raise ValueError("batch_days must be positive")
    if len(data) == 0:
        raise DataError("cannot batch an empty dataset")
    span = int(round(batch_days * SECONDS_PER_DAY))
    secs = data.timestamps.astype(np.int64)
    origin = int(data.timestamps[0].astype("datetime64[D]").astype("datetime64[s]").astype(np.int64))
    slot = (secs - origin) // span
    batches = []
    starts = np.flatnonzero(np.r_[True, slot[1:] != slot[:-1]])
    ends = np.r_[starts[1:], len(data)]
    for k, (s, e) in enumerate(zip(starts, ends)):
        w0 = origin + int(slot[s]) * span
        # coverage tolerance: the batch's own sampling interval (streams may change rate)
        step = _median_interval(data.timestamps[s:e]) or data.sampling_interval
        covered_from = secs[s] - w0 <= step
        covered_to = (w0 + span) - secs[e - 1] <= step
        batches.append(
            Batch(
                index=k,
                start=int(s),
                end=int(e),
                batch_days=float(batch_days),
                window_start=np.datetime64(w0, "s"),
                partial=not (covered_from and covered_to),
            )
        )
    return batches


@dataclass(frozen=True)
class DriftInjection:
    """Distortion applied to the measured inputs from ``start_day`` onward.

    Shifts are in units of each variable's nominal standard deviation; scale
    factors stretch deviations about the nominal mean; ``rotation`` in [0, 1]
    mixes pairs of standardized variables by an angle of ``rotation * pi / 2``.
    """

    start_day: float
    mean_shift: Mapping[str, float] = field(default_factory=dict)
    scale: Mapping[str, float] = field(default_factory=dict)
    rotation: float = 0.0
    sampling_interval: float | None = None

    def __post_init__(self) -> None:
        if any(v <= 0 for v in self.scale.values()):
            raise ValueError("scale factors must be positive")
        if not 0.0 <= self.rotation <= 1.0:
            raise ValueError("rotation strength must lie in [0, 1]")
        if self.sampling_interval is not None and self.sampling_interval <= 0:
            raise ValueError("sampling interval must be positive")
        unknown = (set(self.mean_shift) | set(self.scale)) - set(INPUT_NAMES)
        if unknown:
            raise ValueError(f"drift names unknown input(s): {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "start_day": self.start_day,
            "mean_shift": dict(self.mean_shift),
            "scale": dict(self.scale),
            "rotation": self.rotation,
            "sampling_interval": self.sampling_interval,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DriftInjection":
        return cls(
            start_day=float(d["start_day"]),
            mean_shift=dict(d.get("mean_shift", {})),
            scale=dict(d.get("scale", {})),
            rotation=float(d.get("rotation", 0.0)),
            sampling_interval=d.get("sampling_interval"),
        )


# (intercept, slope on load, noise sd) per input; load lives in roughly [0.45, 1.0]
_AFFINE = np.array(
    [
        [300.0, 80.0, 3.0],
        [110.0, 30.0, 2.0],
        [30.0, 8.0, 1.0],
        [250.0, 70.0, 3.0],
        [35.0, 10.0, 1.0],
        [260.0, 60.0, 3.0],
        [5.5, -2.0, 0.1],
        [7.0, -2.2, 0.12],
    ]
)
_ROTATION_PAIRS = ((0, 5), (1, 6), (2, 7), (3, 4))
DEFAULT_START = np.datetime64("2024-01-01T00:00:00", "s")


def load_profile(t_seconds: np.ndarray, trough: np.ndarray, peak: np.ndarray) -> np.ndarray:
    """Trapezoidal daily load cycle: low overnight, ramp 05-08 h, hold, ramp down 18-22 h.

    ``trough`` and ``peak`` are per-day levels indexed by the day number of each instant.
    """
    day = (t_seconds // SECONDS_PER_DAY).astype(int)
    hour = (t_seconds % SECONDS_PER_DAY) / 3600.0
    lo, hi = trough[day], peak[day]
    up = np.clip((hour - 5.0) / 3.0, 0.0, 1.0)
    down = np.clip((22.0 - hour) / 4.0, 0.0, 1.0)
    return lo + (hi - lo) * np.minimum(up, down)


def _nominal_moments() -> tuple[np.ndarray, np.ndarray]:
    # load moments from one mid-level day at 1-minute resolution
    t = np.arange(0, SECONDS_PER_DAY, 60.0)
    load = load_profile(t, np.array([0.5]), np.array([0.925]))
    mean = _AFFINE[:, 0] + _AFFINE[:, 1] * load.mean()
    std = np.sqrt((_AFFINE[:, 1] * load.std()) ** 2 + _AFFINE[:, 2] ** 2)
    return mean, std


def _target(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # u = load-equivalent reading of each variable
    u = (x - _AFFINE[:, 0]) / _AFFINE[:, 1]
    clean = 300.0 + 1200.0 * u[:, 3] ** 2 + 150.0 * u[:, 0] * u[:, 5]
    # noise sd: 2% of the clean target range over the nominal load span
    lo = 300.0 + 1200.0 * 0.45**2 + 150.0 * 0.45**2
    hi = 300.0 + 1200.0 + 150.0
    return clean + rng.normal(0.0, 0.02 * (hi - lo), size=len(x))


def _apply_drift(x: np.ndarray, drift: DriftInjection) -> np.ndarray:
    mean, std = _nominal_moments()
    z = (x - mean) / std
    scale = np.array([drift.scale.get(n, 1.0) for n in INPUT_NAMES])
    z = z * scale
    theta = drift.rotation * math.pi / 2.0
    if theta:
        c, s = math.cos(theta), math.sin(theta)
        for a, b in _ROTATION_PAIRS:
            za, zb = z[:, a].copy(), z[:, b].copy()
            z[:, a] = c * za - s * zb
            z[:, b] = s * za + c * zb
    z = z + np.array([drift.mean_shift.get(n, 0.0) for n in INPUT_NAMES])
    return mean + std * z


def generate_synthetic(
    days: int,
    interval: float = 600.0,
    drift: DriftInjection | None = None,
    seed: int = 0,
    start: np.datetime64 = DEFAULT_START,
) -> Dataset:
    """Synthesize a load-cycling air-preheater stream.

    The eight operating variables are affine in a latent daily load cycle
    plus Gaussian noise; flue gas DP is a quadratic of the secondary air
    outlet reading plus a flue-gas/primary-air interaction, plus noise at 2%
    of its range. Drift distorts the measured inputs only, so the mapping
    from measured inputs to DP changes after ``drift.start_day``.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    if interval <= 0:
        raise ValueError("interval must be positive")
    total = days * SECONDS_PER_DAY
    if drift is None or drift.start_day >= days:
        offsets = np.arange(0.0, total, interval)
        drift_from = len(offsets)
    else:
        cut = max(drift.start_day, 0.0) * SECONDS_PER_DAY
        before = np.arange(0.0, cut, interval)
        after = np.arange(cut, total, drift.sampling_interval or interval)
        offsets = np.concatenate([before, after])
        drift_from = len(before)

    rng = np.random.default_rng(seed)
    trough = rng.uniform(0.45, 0.55, size=days)
    peak = rng.uniform(0.85, 1.0, size=days)
    load = load_profile(offsets, trough, peak)
    noise = rng.normal(size=(len(offsets), len(INPUT_NAMES))) * _AFFINE[:, 2]
    x = _AFFINE[:, 0] + np.outer(load, _AFFINE[:, 1]) + noise
    y = _target(x, rng)
    if drift_from < len(x):
        x[drift_from:] = _apply_drift(x[drift_from:], drift)

    ts = start + offsets.astype(np.int64).astype("timedelta64[s]")
    step = interval if drift is None or drift_from == len(x) else (drift.sampling_interval or interval)
    return Dataset(PLANT_SCHEMA, ts, np.column_stack([x, y]), _median_interval(ts) if len(ts) > 1 else float(step))
