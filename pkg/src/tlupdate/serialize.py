"""Self-describing JSON documents for networks and ensembles.

Parameters are stored as decimal strings with 17 significant digits, which
round-trips IEEE doubles exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .ann import Architecture, NetworkModel
from .data import Scaler
from .update import Ensemble

FORMAT_VERSION = 1


def _num(x: float) -> str:
    return format(float(x), ".17g")


def network_to_dict(model: NetworkModel) -> dict:
    return {
        "kind": "network",
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture.to_dict(),
        "parameters": [_num(v) for v in model.flat_parameters()],
        "parameter_order": "per layer: weights (out x in, row-major) then bias",
        "scaler": None if model.scaler is None else model.scaler.to_dict(),
        "train_seed": model.train_seed,
        "learning_rate": model.learning_rate,
        "provenance": model.tag,
        "metadata": model.metadata,
    }


def network_from_dict(d: dict) -> NetworkModel:
    if d.get("kind") != "network":
        raise ValueError("not a network document")
    arch = Architecture.from_dict(d["architecture"])
    flat = np.array([float(v) for v in d["parameters"]])
    if flat.size != arch.n_params:
        raise ValueError(f"expected {arch.n_params} parameters, found {flat.size}")
    template = NetworkModel(
        arch,
        tuple(np.zeros(s) for s in arch.layer_shapes),
        tuple(np.zeros(s[0]) for s in arch.layer_shapes),
    )
    return template.with_parameters(
        flat,
        scaler=None if d.get("scaler") is None else Scaler.from_dict(d["scaler"]),
        train_seed=int(d.get("train_seed", 0)),
        learning_rate=d.get("learning_rate"),
        tag=d.get("provenance", "trained"),
        metadata=dict(d.get("metadata") or {}),
    )


def model_to_dict(model: NetworkModel | Ensemble) -> dict:
    if isinstance(model, Ensemble):
        return {
            "kind": "ensemble",
            "format_version": FORMAT_VERSION,
            "combine": "mean",
            "members": [network_to_dict(m) for m in model.members],
        }
    return network_to_dict(model)


def model_from_dict(d: dict) -> NetworkModel | Ensemble:
    if d.get("kind") == "ensemble":
        return Ensemble(tuple(network_from_dict(m) for m in d["members"]))
    return network_from_dict(d)


def dumps(model: NetworkModel | Ensemble) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True)


def save_model(model: NetworkModel | Ensemble, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(model) + "\n")
    return path


def load_model(path: str | Path) -> NetworkModel | Ensemble:
    return model_from_dict(json.loads(Path(path).read_text()))
