"""Grid search over architecture and learning rate, and the narrow learning-rate search used at update time."""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .ann import (
    Architecture,
    DivergenceError,
    Metrics,
    NetworkModel,
    TrainConfig,
    init_network,
    metrics_or_partial,
    split_tail,
    train,
)

LR_MULTIPLIERS = (0.1, 0.25, 0.5, 1.0, 2.0)


class TuningError(RuntimeError):
    def __init__(self, message: str, trials: Sequence["Trial"] = ()):
        self.trials = list(trials)
        lines = [message] + [f"  {t.label}: {t.error}" for t in self.trials]
        super().__init__("\n".join(lines))


@dataclass(frozen=True)
class SearchSpace:
    hidden_widths: tuple[int, ...] = (8, 16, 32, 64)
    hidden_depths: tuple[int, ...] = (1, 2)
    learning_rates: tuple[float, ...] = (0.0003, 0.001, 0.003, 0.01)

    def __post_init__(self) -> None:
        for name in ("hidden_widths", "hidden_depths", "learning_rates"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, vals)
        if any(r <= 0 for r in self.learning_rates):
            raise ValueError("learning rates must be positive")
        if any(w < 1 for w in self.hidden_widths) or any(d < 1 for d in self.hidden_depths):
            raise ValueError("widths and depths must be >= 1")

    def grid(self) -> list[tuple[tuple[int, ...], float]]:
        """(hidden layers, rate) in depth-major, width-minor, rate-innermost order."""
        return [
            ((w,) * d, lr)
            for d, w, lr in itertools.product(self.hidden_depths, self.hidden_widths, self.learning_rates)
        ]

    def to_dict(self) -> dict:
        return {
            "hidden_widths": list(self.hidden_widths),
            "hidden_depths": list(self.hidden_depths),
            "learning_rates": list(self.learning_rates),
        }


@dataclass
class Trial:
    label: str
    architecture: Architecture
    config: TrainConfig | None  # None for the no-update baseline
    metrics: Metrics | None = None
    seconds: float = 0.0
    epochs: int = 0
    error: str | None = None
    model: NetworkModel | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None and self.metrics is not None

    def row(self, include_seconds: bool = True) -> dict:
        m = self.metrics
        row = {
            "trial": self.label,
            "hidden_layers": "-".join(map(str, self.architecture.hidden_layers)),
            "activation": self.architecture.activation,
            "learning_rate": "" if self.config is None else repr(self.config.learning_rate),
            "epochs": self.epochs,
            "val_r2": "" if m is None else repr(m.r2),
            "val_rmse": "" if m is None else repr(m.rmse),
            "val_mae": "" if m is None else repr(m.mae),
            "status": "ok" if self.error is None else "diverged",
        }
        if include_seconds:
            row["seconds"] = f"{self.seconds:.3f}"
        return row


@dataclass
class SearchResult:
    best_index: int
    trials: list[Trial]
    tuning_seconds: float
    training_seconds: float
    model: NetworkModel

    @property
    def best(self) -> Trial:
        return self.trials[self.best_index]

    @property
    def best_config(self) -> tuple[Architecture, TrainConfig | None]:
        return self.best.architecture, self.best.config

    def trials_csv(self, include_seconds: bool = True) -> str:
        return trials_to_csv(self.trials, include_seconds)


def trials_to_csv(trials: Sequence[Trial], include_seconds: bool = True) -> str:
    buf = io.StringIO()
    rows = [t.row(include_seconds) for t in trials]
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _select(trials: Sequence[Trial]) -> int:
    ok = [(t.metrics.rmse, k) for k, t in enumerate(trials) if t.ok and np.isfinite(t.metrics.rmse)]
    if not ok:
        raise TuningError("every trial diverged", trials)
    # min() on (rmse, index) keeps the first trial on ties
    return min(ok)[1]


def search_full(
    inputs: np.ndarray,
    targets: np.ndarray,
    space: SearchSpace,
    seed: int = 0,
    activation: str = "relu",
    base: TrainConfig = TrainConfig(),
) -> SearchResult:
    """Exhaustive grid search scored on each trial's internal validation tail.

    The winning configuration is retrained on the full training split; that
    run is reported as ``training_seconds``.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    t0 = time.perf_counter()
    trials = []
    for hidden, lr in space.grid():
        arch = Architecture(x.shape[1], hidden, activation)
        cfg = replace(base, learning_rate=lr, seed=seed)
        trial = Trial(f"h{'-'.join(map(str, hidden))}_lr{lr:g}", arch, cfg)
        try:
            model, trace = train(init_network(arch, seed), x, y, cfg)
        except DivergenceError as exc:
            trial.error = str(exc)
        else:
            trial.metrics, trial.seconds, trial.epochs = trace.val_metrics, trace.seconds, trace.epochs
        trials.append(trial)
    best = _select(trials)
    tuning_seconds = time.perf_counter() - t0

    arch, cfg = trials[best].architecture, trials[best].config
    t1 = time.perf_counter()
    model, _ = train(init_network(arch, seed), x, y, cfg)
    training_seconds = time.perf_counter() - t1
    return SearchResult(best, trials, tuning_seconds, training_seconds, model)


Predictor = Callable[[NetworkModel, np.ndarray], np.ndarray]


def lr_candidates(base_lr: float) -> list[float]:
    return [base_lr * k for k in LR_MULTIPLIERS]


def search_lr_only(
    model: NetworkModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    base_lr: float,
    seed: int = 0,
    trainable: np.ndarray | None = None,
    score: Predictor | None = None,
    base: TrainConfig = TrainConfig(max_epochs=500, early_stop_patience=20),
) -> SearchResult:
    """Fine-tune copies of ``model`` at five rates around ``base_lr``.

    The update data is shuffled once (seeded); its last 20% is the update
    validation tail on which every trial is scored. A sixth trial keeps the
    model unchanged, so the selection never does worse than no update on
    that tail. ``score(candidate, x)`` overrides how a candidate is turned
    into predictions (ensembles score the combined output).
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if len(y) == 0:
        raise ValueError("update data is empty")
    score = score or (lambda m, xs: m.predict(xs))
    fit_idx, val_idx = split_tail(len(y), 0.2, np.random.default_rng(seed))
    if len(val_idx) == 0:
        val_idx = fit_idx

    t0 = time.perf_counter()
    trials = []
    for lr in lr_candidates(base_lr):
        cfg = replace(base, learning_rate=lr, seed=seed)
        trial = Trial(f"lr{lr:g}", model.architecture, cfg)
        try:
            tuned, trace = train(model, x[fit_idx], y[fit_idx], cfg, trainable=trainable)
        except DivergenceError as exc:
            trial.error = str(exc)
        else:
            trial.model, trial.seconds, trial.epochs = tuned, trace.seconds, trace.epochs
            trial.metrics = metrics_or_partial(y[val_idx], score(tuned, x[val_idx]))
        trials.append(trial)

    b0 = time.perf_counter()
    baseline = Trial("baseline", model.architecture, None, model=model)
    baseline.metrics = metrics_or_partial(y[val_idx], score(model, x[val_idx]))
    baseline.seconds = time.perf_counter() - b0
    trials.append(baseline)

    best = _select(trials)
    tuning_seconds = time.perf_counter() - t0
    return SearchResult(best, trials, tuning_seconds, trials[best].seconds, trials[best].model)
