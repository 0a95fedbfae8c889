"""Population stability index, two-sample Cramér-von Mises with permutation p-value, correlation shift."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import Dataset

PSI_FLOOR = 1e-6


@dataclass(frozen=True)
class PsiResult:
    psi: float
    bin_edges: np.ndarray
    ref_proportions: np.ndarray
    cur_proportions: np.ndarray


@dataclass(frozen=True)
class CvmResult:
    statistic: float
    p_value: float
    n_ref: int
    n_cur: int
    permutations: int


def _floored(counts: np.ndarray) -> np.ndarray:
    p = counts / counts.sum()
    p = np.maximum(p, PSI_FLOOR)
    return p / p.sum()


def psi_from_proportions(ref: np.ndarray, cur: np.ndarray) -> float:
    p, q = np.asarray(ref, float), np.asarray(cur, float)
    return float(np.sum((p - q) * np.log(p / q)))


def psi(reference: np.ndarray, current: np.ndarray, bins: int = 10) -> PsiResult:
    """PSI over bins cut at the reference quantiles k/bins, outer edges at +/-inf.

    Proportions are floored at 1e-6 and renormalized before taking logs.
    A value falls in bin k when ``edge[k] <= value < edge[k+1]``.
    """
    ref = np.asarray(reference, dtype=float).ravel()
    cur = np.asarray(current, dtype=float).ravel()
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if len(ref) < bins or len(cur) < bins:
        raise ValueError(f"PSI with {bins} bins needs at least {bins} values per sample")
    inner = np.quantile(ref, np.arange(1, bins) / bins)
    edges = np.concatenate([[-np.inf], inner, [np.inf]])
    ref_counts = np.bincount(np.searchsorted(inner, ref, side="right"), minlength=bins).astype(float)
    cur_counts = np.bincount(np.searchsorted(inner, cur, side="right"), minlength=bins).astype(float)
    p, q = _floored(ref_counts), _floored(cur_counts)
    return PsiResult(max(psi_from_proportions(p, q), 0.0), edges, p, q)


def _cvm_from_ranks(r: np.ndarray, s: np.ndarray) -> float:
    """Statistic from pooled ranks of each sample, each sorted ascending."""
    n, m = len(r), len(s)
    i = np.arange(1, n + 1)
    j = np.arange(1, m + 1)
    u = n * np.sum((r - i) ** 2) + m * np.sum((s - j) ** 2)
    return float(u / (n * m * (n + m)) - (4 * n * m - 1) / (6 * (n + m)))


def cvm_statistic(reference: np.ndarray, current: np.ndarray) -> float:
    ref = np.asarray(reference, dtype=float).ravel()
    cur = np.asarray(current, dtype=float).ravel()
    ranks = rankdata(np.concatenate([ref, cur]))  # average ranks on ties
    n = len(ref)
    return _cvm_from_ranks(np.sort(ranks[:n]), np.sort(ranks[n:]))


def cvm_two_sample(
    reference: np.ndarray, current: np.ndarray, permutations: int = 999, seed: int = 0
) -> CvmResult:
    """Two-sample Cramér-von Mises statistic with a seeded permutation p-value.

    Permutation k draws from ``default_rng([seed, k])`` so the result does not
    depend on evaluation order. Because relabeling the pooled sample only
    permutes its ranks, ranks are computed once.
    """
    ref = np.asarray(reference, dtype=float).ravel()
    cur = np.asarray(current, dtype=float).ravel()
    if len(ref) == 0 or len(cur) == 0:
        raise ValueError("both samples must be non-empty")
    if permutations < 99:
        raise ValueError("use at least 99 permutations")
    n = len(ref)
    ranks = rankdata(np.concatenate([ref, cur]))
    observed = _cvm_from_ranks(np.sort(ranks[:n]), np.sort(ranks[n:]))
    # guards against round-off making a tied permutation look smaller
    tol = 1e-12 * max(1.0, abs(observed))
    hits = 0
    for k in range(permutations):
        perm = np.random.default_rng([seed, k]).permutation(ranks)
        t = _cvm_from_ranks(np.sort(perm[:n]), np.sort(perm[n:]))
        hits += t >= observed - tol
    return CvmResult(observed, (1 + hits) / (permutations + 1), n, len(cur), permutations)


@dataclass(frozen=True)
class CorrelationShift:
    names: tuple[str, ...]
    reference: np.ndarray
    current: np.ndarray
    max_abs_change: float
    degenerate: tuple[str, ...]  # columns constant in either window; their entries are nan


def _corr(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sd = x.std(axis=0)
    ok = sd > 0
    d = x.shape[1]
    c = np.full((d, d), np.nan)
    if ok.any():
        sub = np.corrcoef(x[:, ok], rowvar=False).reshape(ok.sum(), ok.sum())
        c[np.ix_(ok, ok)] = (sub + sub.T) / 2
    np.fill_diagonal(c, 1.0)
    return c, ok


def correlation_shift(reference: Dataset | np.ndarray, current: Dataset | np.ndarray,
                      names: tuple[str, ...] | None = None) -> CorrelationShift:
    ref = reference.rows if isinstance(reference, Dataset) else np.asarray(reference, float)
    cur = current.rows if isinstance(current, Dataset) else np.asarray(current, float)
    if names is None:
        names = reference.schema.columns if isinstance(reference, Dataset) else tuple(f"x{k}" for k in range(ref.shape[1]))
    if ref.shape[1] != cur.shape[1]:
        raise ValueError("windows have different columns")
    if len(ref) < 3 or len(cur) < 3:
        raise ValueError("each window needs at least 3 rows")
    c_ref, ok_ref = _corr(ref)
    c_cur, ok_cur = _corr(cur)
    ok = ok_ref & ok_cur
    diff = np.abs(c_ref - c_cur)[np.ix_(ok, ok)]
    return CorrelationShift(
        tuple(names),
        c_ref,
        c_cur,
        float(diff.max()) if diff.size else 0.0,
        tuple(n for n, good in zip(names, ok) if not good),
    )


@dataclass(frozen=True)
class FeatureDrift:
    name: str
    psi: PsiResult
    cvm: CvmResult


@dataclass(frozen=True)
class DriftReport:
    features: tuple[FeatureDrift, ...]
    correlation: CorrelationShift

    def to_dict(self) -> dict:
        def mat(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "features": [
                {
                    "feature": f.name,
                    "psi": f.psi.psi,
                    "cvm": f.cvm.statistic,
                    "p_value": f.cvm.p_value,
                    "n_ref": f.cvm.n_ref,
                    "n_cur": f.cvm.n_cur,
                    "permutations": f.cvm.permutations,
                }
                for f in self.features
            ],
            "correlation": {
                "names": list(self.correlation.names),
                "reference": mat(self.correlation.reference),
                "current": mat(self.correlation.current),
                "max_abs_change": self.correlation.max_abs_change,
                "degenerate": list(self.correlation.degenerate),
            },
        }

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "psi", "cvm", "p", "n_ref", "n_cur"])
        for f in self.features:
            w.writerow([f.name, repr(f.psi.psi), repr(f.cvm.statistic), repr(f.cvm.p_value), f.cvm.n_ref, f.cvm.n_cur])
        return buf.getvalue()


def drift_report(reference: Dataset, current: Dataset, bins: int = 10, permutations: int = 999,
                 seed: int = 0) -> DriftReport:
    """PSI and CvM for every column (inputs and target) plus the correlation shift."""
    if reference.schema != current.schema:
        raise ValueError("windows must share a schema")
    feats = []
    for k, name in enumerate(reference.schema.columns):
        a, b = reference.rows[:, k], current.rows[:, k]
        feats.append(FeatureDrift(name, psi(a, b, bins), cvm_two_sample(a, b, permutations, seed + k)))
    return DriftReport(tuple(feats), correlation_shift(reference, current))
