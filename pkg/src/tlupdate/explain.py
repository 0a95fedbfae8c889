"""Exact interventional Shapley values, importance profiles and their evolution across model versions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import factorial
from typing import Callable, Sequence

import numpy as np

MAX_FEATURES = 16


def _as_function(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return model
    raise TypeError("model must be callable or expose predict()")


@dataclass(frozen=True)
class ShapleyAttribution:
    values: np.ndarray
    base: float
    row: np.ndarray

    @property
    def prediction(self) -> float:
        return float(self.base + self.values.sum())


def _coalition_masks(d: int) -> np.ndarray:
    """(2^d, d) boolean matrix; row s has feature j set iff bit j of s is 1."""
    s = np.arange(2**d)[:, None]
    return ((s >> np.arange(d)) & 1).astype(bool)


def _weights(d: int) -> np.ndarray:
    # |S|! (d - |S| - 1)! / d! for |S| = 0..d-1
    return np.array([factorial(k) * factorial(d - k - 1) / factorial(d) for k in range(d)])


def coalition_values(f, row: np.ndarray, background: np.ndarray) -> np.ndarray:
    """v(S) = mean over background rows b of f(x_S with b elsewhere), for every coalition S."""
    d = len(row)
    masks = _coalition_masks(d)
    nb = len(background)
    grid = np.where(masks[:, None, :], row[None, None, :], background[None, :, :]).reshape(-1, d)
    return f(grid).reshape(2**d, nb).mean(axis=1)


def shapley_from_values(v: np.ndarray, d: int) -> np.ndarray:
    masks = _coalition_masks(d)
    sizes = masks.sum(axis=1)
    w = _weights(d)
    phi = np.zeros(d)
    ids = np.arange(2**d)
    for j in range(d):
        without = ids[~masks[:, j]]
        phi[j] = np.sum(w[sizes[without]] * (v[without | (1 << j)] - v[without]))
    return phi


def shapley_values(model, row: np.ndarray, background: np.ndarray) -> ShapleyAttribution:
    """Exact Shapley values of ``model`` at ``row`` by enumerating all 2^d coalitions.

    Features outside a coalition are filled in from each background row and
    the model output is averaged over the background (interventional value
    function). The base value is the mean output over the background.
    """
    f = _as_function(model)
    x = np.asarray(row, dtype=float).ravel()
    bg = np.atleast_2d(np.asarray(background, dtype=float))
    d = len(x)
    if d > MAX_FEATURES:
        raise ValueError(
            f"exact enumeration supports at most {MAX_FEATURES} features (got {d}); "
            "restrict the feature set or group features first"
        )
    if len(bg) == 0:
        raise ValueError("background must be non-empty")
    if bg.shape[1] != d:
        raise ValueError("background and row have different feature counts")
    v = coalition_values(f, x, bg)
    return ShapleyAttribution(shapley_from_values(v, d), float(v[0]), x)


@dataclass(frozen=True)
class ImportanceProfile:
    tag: str
    feature_names: tuple[str, ...]
    importance: np.ndarray  # mean |shapley| per feature
    ranking: tuple[int, ...]  # feature indices, most important first

    def rank_of(self) -> np.ndarray:
        """1-based rank position of each feature."""
        r = np.empty(len(self.ranking), dtype=int)
        r[list(self.ranking)] = np.arange(1, len(self.ranking) + 1)
        return r

    @property
    def top(self) -> str:
        return self.feature_names[self.ranking[0]]

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "features": list(self.feature_names),
            "importance": [float(v) for v in self.importance],
            "ranking": [self.feature_names[k] for k in self.ranking],
        }


def rank_features(importance: np.ndarray) -> tuple[int, ...]:
    # stable sort keeps schema order among ties
    return tuple(int(k) for k in np.argsort(-np.asarray(importance), kind="stable"))


def _subsample(x: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= size:
        return x
    return x[np.sort(rng.choice(len(x), size=size, replace=False))]


def attribute_rows(model, rows: np.ndarray, background: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shapley values for each row; returns (values matrix, base values)."""
    out = [shapley_values(model, r, background) for r in rows]
    return np.array([a.values for a in out]), np.array([a.base for a in out])


def importance_profile(
    model,
    eval_sample: np.ndarray,
    background: np.ndarray,
    tag: str,
    feature_names: Sequence[str] | None = None,
    background_size: int = 100,
    eval_size: int = 200,
    seed: int = 0,
) -> ImportanceProfile:
    """Mean absolute Shapley value per feature over a seeded sub-sample of ``eval_sample``."""
    ev = np.atleast_2d(np.asarray(eval_sample, dtype=float))
    if len(ev) == 0:
        raise ValueError("evaluation sample is empty")
    rng = np.random.default_rng(seed)
    bg = _subsample(np.atleast_2d(np.asarray(background, dtype=float)), background_size, rng)
    ev = _subsample(ev, eval_size, rng)
    values, _ = attribute_rows(model, ev, bg)
    imp = np.abs(values).mean(axis=0)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{k}" for k in range(ev.shape[1]))
    return ImportanceProfile(tag, names, imp, rank_features(imp))


def kendall_tau(rank_a: Sequence[int], rank_b: Sequence[int]) -> float:
    """Kendall tau-a between two tie-free rank vectors over the same items."""
    a, b = np.asarray(rank_a), np.asarray(rank_b)
    n = len(a)
    if n < 2:
        return 1.0
    i, j = np.triu_indices(n, 1)
    s = np.sign(a[i] - a[j]) * np.sign(b[i] - b[j])
    return float(s.sum() / (n * (n - 1) / 2))


@dataclass(frozen=True)
class ImportanceEvolution:
    profiles: tuple[ImportanceProfile, ...]
    taus: tuple[float, ...]  # between consecutive versions

    def rows(self) -> list[tuple[str, str, float, int]]:
        out = []
        for p in self.profiles:
            ranks = p.rank_of()
            for k, name in enumerate(p.feature_names):
                out.append((p.tag, name, float(p.importance[k]), int(ranks[k])))
        return out

    def to_csv(self, group: str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["version", "feature", "importance", "rank"]
        w.writerow(([] if group is None else ["group"]) + head)
        for tag, name, imp, rank in self.rows():
            w.writerow(([] if group is None else [group]) + [tag, name, repr(imp), rank])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "versions": [p.tag for p in self.profiles],
            "kendall_tau": list(self.taus),
            "top_feature": [p.top for p in self.profiles],
        }


def importance_evolution(profiles: Sequence[ImportanceProfile]) -> ImportanceEvolution:
    if len(profiles) < 2:
        raise ValueError("need at least two profiles")
    names = profiles[0].feature_names
    if any(p.feature_names != names for p in profiles):
        raise ValueError("profiles have different feature schemas")
    taus = tuple(kendall_tau(a.rank_of(), b.rank_of()) for a, b in zip(profiles, profiles[1:]))
    return ImportanceEvolution(tuple(profiles), taus)


def attributions_csv(names: Sequence[str], values: np.ndarray, base: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "base", *names])
    for k, (b, vals) in enumerate(zip(base, values)):
        w.writerow([k, repr(float(b)), *map(lambda v: repr(float(v)), vals)])
    return buf.getvalue()
