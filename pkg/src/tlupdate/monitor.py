"""Production replay: daily error aggregation, the consecutive-exceedance trigger and the update buffer."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .data import Batch, Dataset


class Predictor(Protocol):
    def predict(self, inputs: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class TriggerPolicy:
    rmse_baseline: float
    mae_baseline: float
    multiplier: float = 2.0
    consecutive_days: int = 3
    mode: str = "and"  # "and": both errors must exceed; "or": either

    def __post_init__(self) -> None:
        if self.multiplier <= 1:
            raise ValueError("multiplier must be > 1")
        if self.consecutive_days < 1:
            raise ValueError("consecutive_days must be >= 1")
        if self.rmse_baseline <= 0 or self.mae_baseline <= 0:
            raise ValueError("baselines must be positive")
        if self.mode not in ("and", "or"):
            raise ValueError("mode must be 'and' or 'or'")

    def exceeded(self, rmse: float, mae: float) -> bool:
        over_rmse = rmse > self.multiplier * self.rmse_baseline
        over_mae = mae > self.multiplier * self.mae_baseline
        return (over_rmse and over_mae) if self.mode == "and" else (over_rmse or over_mae)

    def to_dict(self) -> dict:
        return {
            "rmse_baseline": self.rmse_baseline,
            "mae_baseline": self.mae_baseline,
            "multiplier": self.multiplier,
            "consecutive_days": self.consecutive_days,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class DailyRecord:
    date: np.datetime64
    rmse: float
    mae: float
    exceeded: bool
    counter: int
    n: int


@dataclass
class TriggerState:
    consecutive_days: int
    records: list[DailyRecord] = field(default_factory=list)
    counter: int = 0
    fired_on: np.datetime64 | None = None

    def advance(self, date: np.datetime64, rmse: float, mae: float, exceeded: bool, n: int) -> bool:
        """Fold one day into the state; returns True when this day fires the trigger."""
        self.counter = self.counter + 1 if exceeded else 0
        self.records.append(DailyRecord(date, rmse, mae, exceeded, self.counter, n))
        if self.fired_on is None and self.counter >= self.consecutive_days:
            self.fired_on = date
            return True
        return False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["date", "rmse", "mae", "exceeded", "counter", "n"])
        for r in self.records:
            w.writerow([str(r.date), repr(r.rmse), repr(r.mae), int(r.exceeded), r.counter, r.n])
        return buf.getvalue()


def first_fire(flags: Sequence[bool], consecutive_days: int) -> int | None:
    """Index of the day on which the trigger fires for a sequence of exceedance flags."""
    state = TriggerState(consecutive_days)
    for k, f in enumerate(flags):
        if state.advance(np.datetime64(k, "D"), 0.0, 0.0, bool(f), 1):
            return k
    return None


@dataclass
class ReplayResult:
    state: TriggerState
    predictions: np.ndarray  # nan for rows not reached
    stop: int  # rows [0, stop) were predicted

    @property
    def fired(self) -> bool:
        return self.state.fired_on is not None


def day_groups(stream: Dataset) -> list[tuple[np.datetime64, int, int]]:
    """(UTC date, start, end) for each calendar day present in the stream."""
    dates = stream.dates
    if len(dates) == 0:
        return []
    starts = np.flatnonzero(np.r_[True, dates[1:] != dates[:-1]])
    ends = np.r_[starts[1:], len(dates)]
    return [(dates[s], int(s), int(e)) for s, e in zip(starts, ends)]


def replay(model: Predictor, stream: Dataset, policy: TriggerPolicy, halt: bool = True) -> ReplayResult:
    """Predict the normalized stream day by day and fold daily RMSE/MAE into the trigger.

    With ``halt`` the replay stops at the end of the firing day and later rows
    stay unpredicted (nan). Without it the whole stream is predicted and the
    trigger state still records when it would have fired.
    """
    if len(stream) == 0:
        raise ValueError("empty stream")
    preds = np.full(len(stream), np.nan)
    state = TriggerState(policy.consecutive_days)
    stop = len(stream)
    for date, s, e in day_groups(stream):
        p = model.predict(stream.inputs[s:e])
        preds[s:e] = p
        resid = stream.target[s:e] - p
        rmse = float(np.sqrt(np.mean(resid**2)))
        mae = float(np.mean(np.abs(resid)))
        fired = state.advance(date, rmse, mae, policy.exceeded(rmse, mae), e - s)
        if fired and halt:
            stop = e
            break
    return ReplayResult(state, preds, stop)


@dataclass(frozen=True)
class UpdateBuffer:
    failing: Batch
    previous: Batch | None
    inputs: np.ndarray
    targets: np.ndarray
    degenerate: bool = False

    @property
    def start(self) -> int:
        return (self.previous or self.failing).start

    @property
    def end(self) -> int:
        return self.failing.end

    def to_dict(self) -> dict:
        return {
            "failing_batch": self.failing.index,
            "previous_batch": None if self.previous is None else self.previous.index,
            "rows": int(len(self.targets)),
            "start": self.start,
            "end": self.end,
            "degenerate": self.degenerate,
        }


def assemble_update_buffer(stream: Dataset, batches: Sequence[Batch], fire_date: np.datetime64) -> UpdateBuffer:
    """The batch containing ``fire_date`` plus the batch immediately before it.

    Batch indices refer to rows of ``stream``. When the failing batch is the
    first one the buffer holds that batch alone and is flagged degenerate.
    """
    day = np.datetime64(fire_date, "D")
    rows_on_day = np.flatnonzero(stream.dates == day)
    if rows_on_day.size == 0:
        raise ValueError(f"no rows on fire date {day}")
    # the fire point is the end of the firing day
    fire_row = int(rows_on_day[-1])
    hits = [k for k, b in enumerate(batches) if b.start <= fire_row < b.end]
    if len(hits) != 1:
        raise ValueError(f"fire date {day} must fall in exactly one batch, found {len(hits)}")
    k = hits[0]
    failing = batches[k]
    previous = batches[k - 1] if k > 0 else None
    lo = (previous or failing).start
    if previous is not None and previous.end != failing.start:
        raise ValueError("previous batch does not immediately precede the failing batch")
    rows = stream.rows[lo : failing.end]
    return UpdateBuffer(failing, previous, rows[:, :-1].copy(), rows[:, -1].copy(), degenerate=previous is None)
