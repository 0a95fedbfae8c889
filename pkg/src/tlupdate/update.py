"""Model repair by last-layer, all-layers and ensemble transfer learning, plus weight-space summaries."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .ann import Metrics, NetworkModel, TrainConfig, layer_mask
from .monitor import UpdateBuffer
from .tuning import SearchResult, search_lr_only

UPDATE_CONFIG = TrainConfig(max_epochs=500, early_stop_patience=20)

STRATEGIES = ("LLTL", "ALTL", "ETL")
QUANTILES = (5, 25, 50, 75, 95)
DEFAULT_LR = 1e-3


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Frozen model versions whose predictions are averaged with equal weight."""

    members: tuple[NetworkModel, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.architecture.input_dim != first.architecture.input_dim:
                raise ValueError("members disagree on input dimension")
            if (m.scaler is None) != (first.scaler is None) or (
                m.scaler is not None and m.scaler.to_dict() != first.scaler.to_dict()
            ):
                raise ValueError("members must share a scaler")

    @property
    def scaler(self):
        return self.members[0].scaler

    @property
    def latest(self) -> NetworkModel:
        return self.members[-1]

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        return np.mean([m.predict(inputs) for m in self.members], axis=0)

    def append(self, member: NetworkModel) -> "Ensemble":
        return Ensemble(self.members + (member,))


@dataclass(frozen=True)
class WeightSummary:
    layer: int
    quantiles: tuple[float, ...]  # at QUANTILES percent
    std: float
    iqr: float
    iqr_ratio: float  # vs. reference; nan when the reference IQR is 0
    std_ratio: float

    @property
    def verdict(self) -> str:
        if not np.isfinite(self.iqr_ratio) or self.iqr_ratio == 1.0:
            return "unchanged"
        return "widened" if self.iqr_ratio > 1.0 else "compressed"

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "quantiles": dict(zip(map(str, QUANTILES), self.quantiles)),
            "std": self.std,
            "iqr": self.iqr,
            "iqr_ratio": self.iqr_ratio if np.isfinite(self.iqr_ratio) else None,
            "std_ratio": self.std_ratio if np.isfinite(self.std_ratio) else None,
            "verdict": self.verdict,
        }


def _ratio(a: float, b: float) -> float:
    return a / b if b > 0 else float("nan")


def weight_summary(model: NetworkModel, reference: NetworkModel) -> list[WeightSummary]:
    """Per-layer weight quantiles and spread relative to ``reference`` (biases excluded)."""
    if model.architecture.layer_shapes != reference.architecture.layer_shapes:
        raise ValueError("weight summaries need identical layer shapes")
    out = []
    for k, (w, w_ref) in enumerate(zip(model.weights, reference.weights)):
        q = np.percentile(w, QUANTILES)
        q_ref = np.percentile(w_ref, QUANTILES)
        iqr, iqr_ref = q[3] - q[1], q_ref[3] - q_ref[1]
        std, std_ref = float(np.std(w)), float(np.std(w_ref))
        out.append(WeightSummary(k, tuple(float(v) for v in q), std, float(iqr), _ratio(iqr, iqr_ref), _ratio(std, std_ref)))
    return out


def weight_summary_csv(rows: Sequence[tuple[str, Sequence[WeightSummary]]]) -> str:
    """Long format (strategy, layer, quantile, value) for violin-style plotting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "layer", "quantile", "value"])
    for label, summaries in rows:
        for s in summaries:
            for q, v in zip(QUANTILES, s.quantiles):
                w.writerow([label, s.layer, f"q{q}", repr(v)])
            w.writerow([label, s.layer, "std", repr(s.std)])
            w.writerow([label, s.layer, "iqr_ratio", repr(s.iqr_ratio)])
    return buf.getvalue()


@dataclass
class UpdateOutcome:
    strategy: str
    model: NetworkModel | Ensemble
    search: SearchResult
    reference_summary: list[WeightSummary]
    updated_summary: list[WeightSummary]
    metrics: Metrics
    seconds: float

    @property
    def updated_network(self) -> NetworkModel:
        """The network whose weights changed: the model itself, or the newest ensemble member."""
        return self.model.latest if isinstance(self.model, Ensemble) else self.model

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "strategy": self.strategy,
            "selected_trial": self.search.best.label,
            "learning_rate": None if self.search.best.config is None else self.search.best.config.learning_rate,
            "trials": [t.row(include_timing) for t in self.search.trials],
            "validation": self.metrics.to_dict(),
            "members": len(self.model.members) if isinstance(self.model, Ensemble) else 1,
            "weights_reference": [s.to_dict() for s in self.reference_summary],
            "weights_updated": [s.to_dict() for s in self.updated_summary],
        }
        if include_timing:
            d["timing"] = {
                "tuning_seconds": self.search.tuning_seconds,
                "training_seconds": self.search.training_seconds,
                "seconds": self.seconds,
            }
        return d


def _base_lr(model: NetworkModel, base_lr: float | None) -> float:
    if base_lr is not None:
        return base_lr
    return model.learning_rate or DEFAULT_LR


def _finish(strategy, source, updated_net, result_model, search, t0) -> UpdateOutcome:
    return UpdateOutcome(
        strategy=strategy,
        model=result_model,
        search=search,
        reference_summary=weight_summary(source, source),
        updated_summary=weight_summary(updated_net, source),
        metrics=search.best.metrics,
        seconds=time.perf_counter() - t0,
    )


def update_lltl(
    model: NetworkModel, buffer: UpdateBuffer, seed: int = 0, base_lr: float | None = None,
    base: TrainConfig = UPDATE_CONFIG,
) -> UpdateOutcome:
    """Retrain only the output layer (weights and bias); hidden layers stay bit-identical."""
    t0 = time.perf_counter()
    flags = [False] * (model.n_layers - 1) + [True]
    search = search_lr_only(
        model, buffer.inputs, buffer.targets, _base_lr(model, base_lr), seed,
        trainable=layer_mask(model.architecture, flags), base=base,
    )
    updated = replace(search.model, tag="LLTL")
    return _finish("LLTL", model, updated, updated, search, t0)


def update_altl(
    model: NetworkModel, buffer: UpdateBuffer, seed: int = 0, base_lr: float | None = None,
    base: TrainConfig = UPDATE_CONFIG,
) -> UpdateOutcome:
    """Warm-started fine-tuning of every layer; the architecture is unchanged."""
    t0 = time.perf_counter()
    search = search_lr_only(model, buffer.inputs, buffer.targets, _base_lr(model, base_lr), seed, base=base)
    updated = replace(search.model, tag="ALTL")
    return _finish("ALTL", model, updated, updated, search, t0)


def update_etl(
    model: NetworkModel | Ensemble, buffer: UpdateBuffer, seed: int = 0, base_lr: float | None = None,
    base: TrainConfig = UPDATE_CONFIG,
) -> UpdateOutcome:
    """Append a fine-tuned copy of the newest member to the (frozen) ensemble.

    Candidates are scored by the prediction of the grown ensemble. If no
    fine-tuned candidate beats the unmodified copy, that copy is appended,
    which leaves a one-member ensemble's output unchanged.
    """
    t0 = time.perf_counter()
    ensemble = model if isinstance(model, Ensemble) else Ensemble((model,))
    source = ensemble.latest
    prior = ensemble.members

    def score(candidate: NetworkModel, x: np.ndarray) -> np.ndarray:
        # running mean over prior members plus the candidate, without building an Ensemble per call
        total = np.sum([m.predict(x) for m in prior], axis=0) + candidate.predict(x)
        return total / (len(prior) + 1)

    search = search_lr_only(source, buffer.inputs, buffer.targets, _base_lr(source, base_lr), seed, score=score,
                            base=base)
    member = replace(search.model, tag=f"ETL-v{len(prior)}")
    grown = ensemble.append(member)
    return _finish("ETL", source, member, grown, search, t0)


UPDATERS = {"LLTL": update_lltl, "ALTL": update_altl, "ETL": update_etl}


def run_strategy(strategy: str, model: NetworkModel | Ensemble, buffer: UpdateBuffer, seed: int = 0,
                 base_lr: float | None = None, base: TrainConfig = UPDATE_CONFIG) -> UpdateOutcome:
    if strategy not in UPDATERS:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy != "ETL" and isinstance(model, Ensemble):
        raise ValueError(f"{strategy} updates a single network, not an ensemble")
    return UPDATERS[strategy](model, buffer, seed, base_lr, base)
