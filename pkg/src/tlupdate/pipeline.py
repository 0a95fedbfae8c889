"""End-to-end loop: acquire, train, replay with trigger, update, redeploy, evaluate, report."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .ann import Metrics, NetworkModel, TrainConfig, metrics_or_partial
from .data import (
    PLANT_SCHEMA,
    Batch,
    DataError,
    Dataset,
    DriftInjection,
    FeatureSchema,
    Scaler,
    apply_scaler,
    fit_scaler,
    generate_synthetic,
    load_csv,
    make_batches,
)
from .drift import DriftReport, drift_report
from .explain import ImportanceEvolution, ImportanceProfile, importance_evolution, importance_profile
from .monitor import ReplayResult, TriggerPolicy, TriggerState, UpdateBuffer, assemble_update_buffer, replay
from .serialize import save_model
from .tuning import SearchResult, SearchSpace, search_full, trials_to_csv
from .update import STRATEGIES, UpdateOutcome, run_strategy, weight_summary_csv

log = logging.getLogger(__name__)

# guards post-update baselines against a perfect validation fit
MIN_BASELINE = 1e-12


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    data: Mapping[str, Any]
    batch_days: float = 5.0
    train_batches: int = 2
    test_fraction: float = 0.2
    multiplier: float = 2.0
    consecutive_days: int = 3
    trigger_mode: str = "and"
    search_space: SearchSpace = SearchSpace()
    activation: str = "relu"
    train: TrainConfig = TrainConfig()
    update: TrainConfig = TrainConfig(max_epochs=500, early_stop_patience=20)
    strategies: tuple[str, ...] = STRATEGIES
    seed: int = 0
    drift_bins: int = 10
    drift_permutations: int = 999
    explain: bool = True
    background_size: int = 100
    eval_size: int = 200
    multi_cycle: bool = False
    output_dir: str = "run"

    def __post_init__(self) -> None:
        if not self.strategies:
            raise ConfigError("select at least one strategy")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")
        if self.batch_days <= 0:
            raise ConfigError("batch_days must be > 0")
        if self.train_batches < 1:
            raise ConfigError("train_batches must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if "csv" not in self.data and "synthetic" not in self.data:
            raise ConfigError("data needs a 'csv' path or a 'synthetic' spec")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        try:
            d = dict(d)
            trig = d.pop("trigger", {})
            space = d.pop("search_space", None)
            tr = d.pop("train", {})
            up = d.pop("update", {})
            dr = d.pop("drift", {})
            ex = d.pop("explain", {})
            kw: dict[str, Any] = {}
            for key in ("data", "batch_days", "train_batches", "test_fraction", "activation", "seed",
                        "multi_cycle", "output_dir"):
                if key in d:
                    kw[key] = d.pop(key)
            if "strategies" in d:
                kw["strategies"] = tuple(d.pop("strategies"))
            if d:
                raise ConfigError(f"unknown config keys {sorted(d)}")
            if "data" not in kw:
                raise ConfigError("config needs a 'data' section")
            kw["multiplier"] = float(trig.get("multiplier", 2.0))
            kw["consecutive_days"] = int(trig.get("consecutive_days", 3))
            kw["trigger_mode"] = trig.get("mode", "and")
            if space is not None:
                kw["search_space"] = SearchSpace(
                    tuple(space.get("hidden_widths", SearchSpace.hidden_widths)),
                    tuple(space.get("hidden_depths", SearchSpace.hidden_depths)),
                    tuple(space.get("learning_rates", SearchSpace.learning_rates)),
                )
            kw["train"] = TrainConfig(
                max_epochs=int(tr.get("max_epochs", 2000)),
                early_stop_patience=int(tr.get("patience", 20)),
                mini_batch_size=int(tr.get("mini_batch_size", 32)),
            )
            kw["update"] = TrainConfig(
                max_epochs=int(up.get("max_epochs", 500)),
                early_stop_patience=int(up.get("patience", 20)),
                mini_batch_size=int(up.get("mini_batch_size", 32)),
            )
            kw["drift_bins"] = int(dr.get("bins", 10))
            kw["drift_permutations"] = int(dr.get("permutations", 999))
            kw["explain"] = bool(ex.get("enabled", True))
            kw["background_size"] = int(ex.get("background_size", 100))
            kw["eval_size"] = int(ex.get("eval_size", 200))
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "data": dict(self.data),
            "batch_days": self.batch_days,
            "train_batches": self.train_batches,
            "test_fraction": self.test_fraction,
            "trigger": {"multiplier": self.multiplier, "consecutive_days": self.consecutive_days,
                        "mode": self.trigger_mode},
            "search_space": self.search_space.to_dict(),
            "activation": self.activation,
            "train": {"max_epochs": self.train.max_epochs, "patience": self.train.early_stop_patience,
                      "mini_batch_size": self.train.mini_batch_size},
            "update": {"max_epochs": self.update.max_epochs, "patience": self.update.early_stop_patience,
                       "mini_batch_size": self.update.mini_batch_size},
            "strategies": list(self.strategies),
            "seed": self.seed,
            "drift": {"bins": self.drift_bins, "permutations": self.drift_permutations},
            "explain": {"enabled": self.explain, "background_size": self.background_size,
                        "eval_size": self.eval_size},
            "multi_cycle": self.multi_cycle,
            "output_dir": self.output_dir,
        }


class Timer:
    """Collects (stage, item, seconds) rows with a monotonic clock."""

    def __init__(self) -> None:
        self.rows: list[tuple[str, str, float]] = []

    @contextmanager
    def __call__(self, stage: str, item: str = "total"):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.rows.append((stage, item, time.perf_counter() - t0))

    def add(self, stage: str, item: str, seconds: float) -> None:
        self.rows.append((stage, item, seconds))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "item", "seconds"])
        for stage, item, s in self.rows:
            w.writerow([stage, item, f"{s:.3f}"])
        return buf.getvalue()


def acquire(data_spec: Mapping[str, Any]) -> Dataset:
    if "csv" in data_spec:
        schema = FeatureSchema.from_dict(data_spec["schema"]) if "schema" in data_spec else PLANT_SCHEMA
        return load_csv(data_spec["csv"], schema)
    spec = dict(data_spec["synthetic"])
    drift = spec.get("drift")
    return generate_synthetic(
        days=int(spec.get("days", 30)),
        interval=float(spec.get("interval", 600.0)),
        drift=None if drift is None else DriftInjection.from_dict(drift),
        seed=int(spec.get("seed", 0)),
    )


@dataclass
class Prepared:
    raw: Dataset
    norm: Dataset
    batches: list[Batch]
    scaler: Scaler
    train_end: int
    train_idx: np.ndarray
    test_idx: np.ndarray


def prepare(cfg: PipelineConfig, raw: Dataset) -> Prepared:
    """Batch the stream, fit the scaler on the training batches and split them 80/20."""
    batches = make_batches(raw, cfg.batch_days)
    if len(batches) <= cfg.train_batches:
        raise DataError(
            f"need more than {cfg.train_batches} batches of {cfg.batch_days} days; data has {len(batches)}"
        )
    train_end = batches[cfg.train_batches - 1].end
    scaler = fit_scaler(raw.slice(0, train_end))
    norm = apply_scaler(scaler, raw)
    order = np.random.default_rng(cfg.seed).permutation(train_end)
    n_test = max(1, int(round(cfg.test_fraction * train_end)))
    return Prepared(raw, norm, batches, scaler, train_end, np.sort(order[n_test:]), np.sort(order[:n_test]))


@dataclass
class Training:
    model: NetworkModel
    search: SearchResult
    test: Metrics


def train_reference(cfg: PipelineConfig, prep: Prepared) -> Training:
    x, y = prep.norm.inputs, prep.norm.target
    search = search_full(x[prep.train_idx], y[prep.train_idx], cfg.search_space, cfg.seed, cfg.activation, cfg.train)
    model = search.model
    test = metrics_or_partial(y[prep.test_idx], model.predict(x[prep.test_idx]))
    model = replace(
        model,
        scaler=prep.scaler,
        tag="reference",
        metadata={"test_metrics": test.to_dict(), "train_end": int(prep.train_end)},
    )
    return Training(model, search, test)


def policy_for(cfg: PipelineConfig, rmse: float, mae: float) -> TriggerPolicy:
    return TriggerPolicy(max(rmse, MIN_BASELINE), max(mae, MIN_BASELINE), cfg.multiplier, cfg.consecutive_days,
                         cfg.trigger_mode)


@dataclass
class Cycle:
    """One update: which buffer, the outcome, and the post-update trigger state."""

    buffer: UpdateBuffer
    fired_on: np.datetime64
    outcome: UpdateOutcome
    replay: TriggerState | None = None


@dataclass
class StrategyRun:
    strategy: str
    cycles: list[Cycle]
    predictions: np.ndarray  # over the evaluation rows
    metrics: Metrics | None

    @property
    def final_model(self):
        return self.cycles[-1].outcome.model


@dataclass
class RunReport:
    config: PipelineConfig
    schema: FeatureSchema
    n_rows: int
    batches: list[Batch]
    training: Training
    replay: ReplayResult
    stream_start: int
    buffer: UpdateBuffer | None = None
    drift: DriftReport | None = None
    eval_start: int | None = None
    strategies: dict[str, StrategyRun] = field(default_factory=dict)
    stale_metrics: Metrics | None = None
    stale_predictions: np.ndarray | None = None
    evolutions: dict[str, ImportanceEvolution] = field(default_factory=dict)
    reference_profile: ImportanceProfile | None = None
    timer: Timer = field(default_factory=Timer)
    eval_timestamps: np.ndarray | None = None
    eval_actual: np.ndarray | None = None
    manifest: list[str] = field(default_factory=list)

    @property
    def fired(self) -> bool:
        return self.buffer is not None

    def to_dict(self) -> dict:
        """Everything except wall-clock timings, so reruns serialize identically."""
        tr = self.training
        d: dict[str, Any] = {
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "rows": self.n_rows,
            "batches": [b.to_dict() for b in self.batches],
            "training": {
                "architecture": tr.model.architecture.to_dict(),
                "learning_rate": tr.model.learning_rate,
                "test": tr.test.to_dict(),
                "selected_trial": tr.search.best.label,
                "trials": len(tr.search.trials),
            },
            "trigger": {
                "policy": policy_for(self.config, tr.test.rmse, tr.test.mae).to_dict(),
                "fired_on": None if self.replay.state.fired_on is None else str(self.replay.state.fired_on),
                "days_replayed": len(self.replay.state.records),
                "buffer": None if self.buffer is None else self.buffer.to_dict(),
            },
            "stages": {
                "drift": "done" if self.drift is not None else "skipped",
                "update": "done" if self.strategies else "skipped",
                "explain": "done" if self.reference_profile is not None else "skipped",
            },
        }
        d["drift"] = None if self.drift is None else self.drift.to_dict()
        d["evaluation"] = {
            "rows": None if self.eval_start is None else self.n_rows - self.eval_start,
            "start_row": self.eval_start,
            "stale": None if self.stale_metrics is None else self.stale_metrics.to_dict(),
            "updated": {k: (None if r.metrics is None else r.metrics.to_dict()) for k, r in self.strategies.items()},
        }
        d["updates"] = {
            k: [
                {
                    "fired_on": str(c.fired_on),
                    "buffer": c.buffer.to_dict(),
                    "outcome": c.outcome.to_dict(include_timing=False),
                }
                for c in r.cycles
            ]
            for k, r in self.strategies.items()
        }
        d["importance"] = {
            "reference": None if self.reference_profile is None else self.reference_profile.to_dict(),
            "evolution": {k: e.to_dict() for k, e in self.evolutions.items()},
        }
        d["artifacts"] = list(self.manifest)
        return d


def _eval_metrics(actual: np.ndarray, pred: np.ndarray) -> Metrics | None:
    if len(actual) == 0:
        return None
    return metrics_or_partial(actual, pred)


def _run_strategy(cfg: PipelineConfig, prep: Prepared, model: NetworkModel, strategy: str, buffer: UpdateBuffer,
                  fired_on: np.datetime64, timer: Timer) -> StrategyRun:
    norm = prep.norm
    eval_start = buffer.end
    t0 = time.perf_counter()
    outcome = run_strategy(strategy, model, buffer, cfg.seed, base=cfg.update)
    timer.add(f"update:{strategy}", "tuning", outcome.search.tuning_seconds)
    timer.add(f"update:{strategy}", "training", outcome.search.training_seconds)
    for t in outcome.search.trials:
        timer.add(f"update:{strategy}", f"trial:{t.label}", t.seconds)
    cycles = [Cycle(buffer, fired_on, outcome)]
    preds = np.full(len(norm) - eval_start, np.nan)
    current = outcome.model
    cursor = eval_start
    while cursor < len(norm):
        m = outcome.metrics
        policy = policy_for(cfg, m.rmse, m.mae)
        segment = norm.slice(cursor, len(norm))
        rr = replay(current, segment, policy, halt=cfg.multi_cycle)
        cycles[-1].replay = rr.state
        if not (cfg.multi_cycle and rr.fired):
            preds[cursor - eval_start :] = rr.predictions
            break
        nxt = assemble_update_buffer(norm, prep.batches, rr.state.fired_on)
        if nxt.end <= cursor:
            preds[cursor - eval_start :] = current.predict(segment.inputs)
            break
        # rows up to the end of the new buffer are served by the model that fired
        preds[cursor - eval_start : nxt.end - eval_start] = current.predict(norm.inputs[cursor : nxt.end])
        outcome = run_strategy(strategy, current, nxt, cfg.seed + len(cycles), base=cfg.update)
        timer.add(f"update:{strategy}", f"cycle{len(cycles)}:tuning", outcome.search.tuning_seconds)
        cycles.append(Cycle(nxt, rr.state.fired_on, outcome))
        current = outcome.model
        cursor = nxt.end
    timer.add(f"update:{strategy}", "total", time.perf_counter() - t0)
    actual = norm.target[eval_start:]
    return StrategyRun(strategy, cycles, preds, _eval_metrics(actual, preds))


def run_pipeline(cfg: PipelineConfig, raw: Dataset | None = None, out_dir: str | Path | None = None,
                 emit: bool = True) -> RunReport:
    """Run every stage in order and (optionally) write the report files.

    Stages: acquire, train with full search, replay with trigger, drift report
    and buffer on fire, each strategy's update, post-update replay on the rows
    after the buffer, importance profiles, emission.
    """
    timer = Timer()
    with timer("acquire"):
        raw = raw if raw is not None else acquire(cfg.data)
    prep = prepare(cfg, raw)

    training = train_reference(cfg, prep)
    timer.add("reference", "tuning", training.search.tuning_seconds)
    timer.add("reference", "training", training.search.training_seconds)
    for t in training.search.trials:
        timer.add("reference", f"trial:{t.label}", t.seconds)
    model = training.model
    log.info("reference model %s test rmse %.4f", training.search.best.label, training.test.rmse)

    stream = prep.norm.slice(prep.train_end, len(prep.norm))
    with timer("replay"):
        rr = replay(model, stream, policy_for(cfg, training.test.rmse, training.test.mae))
    report = RunReport(cfg, raw.schema, len(raw), prep.batches, training, rr, prep.train_end, timer=timer)

    if rr.fired:
        buffer = assemble_update_buffer(prep.norm, prep.batches, rr.state.fired_on)
        report.buffer = buffer
        eval_start = buffer.end
        report.eval_start = eval_start
        log.info("trigger fired on %s; buffer rows %d-%d", rr.state.fired_on, buffer.start, buffer.end)

        with timer("drift"):
            current = raw.slice(eval_start, len(raw))
            if len(current) < max(cfg.drift_bins, 3):
                current = raw.slice(buffer.failing.start, buffer.failing.end)
            report.drift = drift_report(raw.slice(0, prep.train_end), current, cfg.drift_bins,
                                        cfg.drift_permutations, cfg.seed)

        for s in cfg.strategies:
            report.strategies[s] = _run_strategy(cfg, prep, model, s, buffer, rr.state.fired_on, timer)
        actual = prep.norm.target[eval_start:]
        report.stale_predictions = model.predict(prep.norm.inputs[eval_start:]) if len(actual) else np.empty(0)
        report.stale_metrics = _eval_metrics(actual, report.stale_predictions)
        report.eval_timestamps = prep.norm.timestamps[eval_start:]
        report.eval_actual = actual
    else:
        report.eval_timestamps = stream.timestamps[: rr.stop]
        report.eval_actual = stream.target[: rr.stop]
        report.stale_predictions = rr.predictions[: rr.stop]

    if cfg.explain:
        with timer("explain"):
            _explain(cfg, prep, report)

    if emit:
        with timer("emit"):
            emit_report(report, out_dir if out_dir is not None else cfg.output_dir)
    return report


def _explain(cfg: PipelineConfig, prep: Prepared, report: RunReport) -> None:
    names = prep.raw.schema.input_names
    background = prep.norm.inputs[prep.train_idx]
    start = report.eval_start if report.eval_start is not None else prep.train_end
    window = prep.norm.inputs[start:]
    if len(window) == 0:
        window = prep.norm.inputs[prep.train_end :]
    kw = dict(feature_names=names, background_size=cfg.background_size, eval_size=cfg.eval_size, seed=cfg.seed)
    ref = importance_profile(report.training.model, window, background, "reference", **kw)
    report.reference_profile = ref
    for s, run in report.strategies.items():
        profiles = [ref]
        for k, c in enumerate(run.cycles, start=1):
            profiles.append(importance_profile(c.outcome.model, window, background, f"{s}-v{k}", **kw))
        report.evolutions[s] = importance_evolution(profiles)


def _write(path: Path, text: str, manifest: list[Path]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    manifest.append(path)


def _num(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def emit_report(report: RunReport, out_dir: str | Path) -> list[Path]:
    """Write report JSON, CSV tables and model files; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written: list[Path] = []

    # daily errors: the reference model's replay, then each strategy's post-update replay
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "date", "rmse", "mae", "exceeded", "counter", "n"])
    for r in report.replay.state.records:
        w.writerow(["baseline", str(r.date), repr(r.rmse), repr(r.mae), int(r.exceeded), r.counter, r.n])
    for s, run in report.strategies.items():
        for k, c in enumerate(run.cycles, start=1):
            if c.replay is None:
                continue
            for r in c.replay.records:
                w.writerow([f"{s}-v{k}", str(r.date), repr(r.rmse), repr(r.mae), int(r.exceeded), r.counter, r.n])
    _write(out / "daily_errors.csv", buf.getvalue(), written)

    # parity: actual vs predicted on the evaluation rows
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["baseline"] + list(report.strategies)
    w.writerow(["timestamp", "actual"] + cols)
    series = [report.stale_predictions] + [r.predictions for r in report.strategies.values()]
    for k, ts in enumerate(report.eval_timestamps if report.eval_timestamps is not None else []):
        w.writerow([f"{ts}Z", _num(report.eval_actual[k])] + [_num(p[k]) for p in series])
    _write(out / "parity.csv", buf.getvalue(), written)

    rows = []
    for s, run in report.strategies.items():
        for k, c in enumerate(run.cycles, start=1):
            if k == 1:
                rows.append(("reference", c.outcome.reference_summary))
            rows.append((f"{s}-v{k}", c.outcome.updated_summary))
    # one reference block is enough: every strategy starts from the same model
    seen, dedup = set(), []
    for label, summ in rows:
        if label in seen:
            continue
        seen.add(label)
        dedup.append((label, summ))
    _write(out / "weight_summary.csv", weight_summary_csv(dedup), written)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "version", "feature", "importance", "rank"])
    if report.evolutions:
        for s, evo in report.evolutions.items():
            for tag, name, imp, rank in evo.rows():
                w.writerow([s, tag, name, repr(imp), rank])
    elif report.reference_profile is not None:
        p = report.reference_profile
        for k, name in enumerate(p.feature_names):
            w.writerow(["reference", p.tag, name, repr(float(p.importance[k])), int(p.rank_of()[k])])
    _write(out / "importance_evolution.csv", buf.getvalue(), written)

    _write(out / "trials.csv", trials_to_csv(report.training.search.trials, include_seconds=False), written)

    if report.strategies:
        buf = io.StringIO()
        w = None
        for s, run in report.strategies.items():
            for k, c in enumerate(run.cycles, start=1):
                for t in c.outcome.search.trials:
                    row = {"strategy": s, "cycle": k, **t.row(include_seconds=False)}
                    if w is None:
                        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
                        w.writeheader()
                    w.writerow(row)
        _write(out / "update_trials.csv", buf.getvalue(), written)

    if report.drift is not None:
        _write(out / "drift.json", json.dumps(report.drift.to_dict(), indent=1) + "\n", written)
        _write(out / "drift_features.csv", report.drift.table_csv(), written)

    trigger = {
        "fired_on": None if report.replay.state.fired_on is None else str(report.replay.state.fired_on),
        "baselines": {"rmse": report.training.test.rmse, "mae": report.training.test.mae},
        "buffer": None if report.buffer is None else report.buffer.to_dict(),
    }
    _write(out / "trigger.json", json.dumps(trigger, indent=1) + "\n", written)

    written.append(save_model(report.training.model, out / "models" / "reference.json"))
    for s, run in report.strategies.items():
        written.append(save_model(run.final_model, out / "models" / f"{s}.json"))

    _write(out / "timing.csv", report.timer.to_csv(), written)

    report.manifest = sorted(str(p.relative_to(out)) for p in written) + ["report.json"]
    _write(out / "report.json", json.dumps(report.to_dict(), indent=1) + "\n", written)
    return written
