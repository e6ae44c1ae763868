"""Derived measures over score tensors.

Controllability, mean-level change (Cohen's d), rank-order stability,
ipsative change, permutation variance and per-dimension significance.  All
functions are pure; iteration order is fixed so reductions are reproducible.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import stats
from .tensor import ScoreTensor

__all__ = [
    "MetricError",
    "ControllabilityReport",
    "MeanLevelReport",
    "RankOrderReport",
    "IpsativeSummary",
    "StabilityReport",
    "SignificanceRow",
    "controllability",
    "cohens_d",
    "mean_level_aggregate",
    "rank_order_stability",
    "ipsative_change",
    "ipsative_pairs",
    "permutation_variance",
    "stability_report",
    "significance_grid",
    "load_human_baselines",
]

# Ipsative correlations below the smallest human ipsative r count as
# bigger-than-human changes.
HUMAN_IPSATIVE_FLOOR = 0.59


class MetricError(ValueError):
    pass


# -- controllability -------------------------------------------------------


@dataclass(frozen=True)
class ControllabilityReport:
    per_perspective: dict[str, float]
    global_value: float
    permutation_count: int
    # Per-permutation C_P values (NaN where excluded), for dispersion and tests.
    per_permutation: dict[str, tuple[float, ...]] = field(default_factory=dict)

    @property
    def std(self) -> dict[str, float]:
        return {p: float(np.nanstd(v)) for p, v in self.per_permutation.items()}


def controllability(
    tensor: ScoreTensor,
    target_map: Mapping[str, Iterable[str]],
    context: str | None = None,
) -> ControllabilityReport:
    """Margin of target over non-target dimensions on normalized scores.

    For each permutation C_P = mean over targets - mean over the rest; the
    per-perspective value is the mean over permutations and the global value
    the mean over perspectives.
    """
    if context is None:
        if len(tensor.contexts) != 1:
            raise MetricError("tensor has several contexts; pass one")
        ci = 0
    else:
        ci = tensor.context_index(context)
    dims = tensor.dimensions
    per, per_perm = {}, {}
    for j, label in enumerate(tensor.perspectives):
        if label not in target_map:
            raise MetricError(f"no target set for perspective {label!r}")
        targets = set(target_map[label])
        unknown = targets - set(dims)
        if unknown:
            raise MetricError(f"unknown target dimensions {sorted(unknown)}")
        if not targets or len(targets) == len(dims):
            raise MetricError(f"target set of {label!r} must be a proper nonempty subset")
        mask = np.array([d in targets for d in dims])
        s = tensor.normalized[ci, j]
        c_p = s[:, mask].mean(axis=1) - s[:, ~mask].mean(axis=1)
        valid = c_p[~np.isnan(c_p)]
        if valid.size == 0:
            raise MetricError(f"perspective {label!r} has no valid permutations")
        per[label] = float(valid.mean())
        per_perm[label] = tuple(float(x) for x in c_p)
    glob = float(np.mean(list(per.values())))
    return ControllabilityReport(per, glob, len(tensor.permutations), per_perm)


# -- mean-level change -----------------------------------------------------


def cohens_d(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """Standardized mean difference with the pooled sample standard deviation.

    A zero difference gives 0 even with zero spread; a nonzero difference with
    zero spread gives +/-inf.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise MetricError("each group needs at least 2 samples")
    diff = float(a.mean() - b.mean())
    if diff == 0.0:
        return 0.0
    pooled = math.sqrt(((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / (a.size + b.size - 2))
    if pooled == 0.0:
        return math.copysign(math.inf, diff)
    return diff / pooled


@dataclass(frozen=True)
class MeanLevelReport:
    # (condition_a, condition_b, dimension) -> d
    pairs: dict[tuple[str, str, str], float]
    mean_abs_d: float
    count: int


def _valid(v: np.ndarray) -> np.ndarray:
    return v[~np.isnan(v)]


def mean_level_aggregate(
    tensor: ScoreTensor, axis: str = "context", fixed: str | None = None, which: str = "raw"
) -> MeanLevelReport:
    """Mean |d| over every (condition pair, dimension), samples over permutations."""
    labels, v = tensor.conditions(axis, fixed, which)
    if len(labels) < 2:
        raise MetricError("need at least 2 conditions")
    pairs = {}
    for a, b in itertools.combinations(range(len(labels)), 2):
        for m, d in enumerate(tensor.dimensions):
            pairs[(labels[a], labels[b], d)] = cohens_d(_valid(v[a, :, m]), _valid(v[b, :, m]))
    values = [abs(x) for x in pairs.values()]
    return MeanLevelReport(pairs, float(np.mean(values)), len(values))


# -- rank-order stability --------------------------------------------------


@dataclass(frozen=True)
class RankOrderReport:
    # Direction 1: order of conditions under permutation change.
    condition_order: dict[str, float]
    # Direction 2: order of permutations under condition change.
    permutation_order: dict[str, float]
    condition_order_mean: float
    permutation_order_mean: float
    per_dimension_mean: dict[str, float]
    grand_mean: float
    dropped_pairs: int
    method: str = "pearson"


def _corr(method: str):
    if method == "pearson":
        return stats.pearson_r
    if method == "spearman":
        return stats.spearman_r
    raise MetricError(f"method must be 'pearson' or 'spearman', got {method!r}")


def _mean_pairwise(vectors: Sequence[np.ndarray], corr) -> tuple[float, int]:
    rs, dropped = [], 0
    for x, y in itertools.combinations(vectors, 2):
        keep = ~(np.isnan(x) | np.isnan(y))
        try:
            rs.append(corr(x[keep], y[keep], min_length=2))
        except stats.StatsError:
            dropped += 1
    return (float(np.mean(rs)) if rs else math.nan), dropped


def rank_order_stability(
    tensor: ScoreTensor,
    axis: str = "context",
    fixed: str | None = None,
    which: str = "raw",
    method: str = "pearson",
) -> RankOrderReport:
    """Average correlation between orderings, in both directions.

    Direction 1 correlates the vector of condition scores of every pair of
    permutations; direction 2 correlates the vector of permutation scores of
    every pair of conditions.  Pairs with a zero-variance vector are dropped
    and counted.
    """
    labels, v = tensor.conditions(axis, fixed, which)
    if len(labels) < 2 or v.shape[1] < 2:
        raise MetricError("need at least 2 conditions and 2 permutations")
    corr = _corr(method)
    one, two, dropped = {}, {}, 0
    for m, d in enumerate(tensor.dimensions):
        r1, n1 = _mean_pairwise([v[:, k, m] for k in range(v.shape[1])], corr)
        r2, n2 = _mean_pairwise([v[c, :, m] for c in range(v.shape[0])], corr)
        one[d], two[d] = r1, r2
        dropped += n1 + n2
    m1 = float(np.nanmean(list(one.values()))) if not all(math.isnan(x) for x in one.values()) else math.nan
    m2 = float(np.nanmean(list(two.values()))) if not all(math.isnan(x) for x in two.values()) else math.nan
    per_dim = {d: (one[d] + two[d]) / 2.0 for d in tensor.dimensions}
    return RankOrderReport(one, two, m1, m2, per_dim, (m1 + m2) / 2.0, dropped, method)


# -- ipsative change -------------------------------------------------------


@dataclass(frozen=True)
class IpsativeSummary:
    condition_a: str
    condition_b: str
    mean: float
    median: float
    std: float
    min: float
    max: float
    n: int
    dropped: int
    which: str = "raw"
    method: str = "pearson"
    values: tuple[float, ...] = ()

    @property
    def below_human(self) -> bool:
        return self.mean < HUMAN_IPSATIVE_FLOOR


def ipsative_change(
    tensor: ScoreTensor,
    condition_a: str,
    condition_b: str,
    axis: str = "context",
    fixed: str | None = None,
    which: str = "raw",
    method: str = "pearson",
) -> IpsativeSummary:
    """Per-permutation correlation of the two dimension profiles, summarized.

    The standard deviation is the population one over permutations.
    """
    labels, v = tensor.conditions(axis, fixed, which)
    if len(tensor.dimensions) < 3:
        raise MetricError("need at least 3 dimensions")
    try:
        a, b = v[labels.index(condition_a)], v[labels.index(condition_b)]
    except ValueError:
        raise MetricError(f"unknown condition in ({condition_a!r}, {condition_b!r})") from None
    corr = _corr(method)
    rs, dropped = [], 0
    for k in range(v.shape[1]):
        if np.isnan(a[k]).any() or np.isnan(b[k]).any():
            dropped += 1
            continue
        try:
            rs.append(corr(a[k], b[k]))
        except stats.StatsError:
            dropped += 1
    if not rs:
        nan = math.nan
        return IpsativeSummary(condition_a, condition_b, nan, nan, nan, nan, nan, 0, dropped, which, method)
    r = np.array(rs)
    return IpsativeSummary(
        condition_a, condition_b, float(r.mean()), float(np.median(r)), float(r.std()),
        float(r.min()), float(r.max()), r.size, dropped, which, method, tuple(rs),
    )


def ipsative_pairs(tensor: ScoreTensor, axis: str = "context", fixed: str | None = None,
                   which: str = "raw", method: str = "pearson") -> list[IpsativeSummary]:
    labels, _ = tensor.conditions(axis, fixed, which)
    return [ipsative_change(tensor, a, b, axis, fixed, which, method)
            for a, b in itertools.combinations(labels, 2)]


# -- permutation variance --------------------------------------------------


def permutation_variance(tensor: ScoreTensor, which: str = "normalized", ddof: int = 0) -> float:
    """Variance over permutations, averaged over conditions then dimensions.

    Every (context, perspective) pair is one condition.  ``ddof=0`` is the
    population variance.
    """
    v = tensor.values(which)
    if v.shape[2] < 2:
        raise MetricError("need at least 2 permutations")
    flat = v.reshape(-1, v.shape[2], v.shape[3])
    per_dim = []
    for m in range(flat.shape[2]):
        per_cond = [np.var(_valid(flat[c, :, m]), ddof=ddof) for c in range(flat.shape[0])]
        per_dim.append(np.mean(per_cond))
    return float(np.mean(per_dim))


# -- aggregate -------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    mean_level: MeanLevelReport
    rank_order: RankOrderReport
    ipsative: list[IpsativeSummary]
    ipsative_mean: float
    permutation_variance: float


def stability_report(tensor: ScoreTensor, axis: str = "context", fixed: str | None = None,
                     which: str = "raw", method: str = "pearson") -> StabilityReport:
    ips = ipsative_pairs(tensor, axis, fixed, which, method)
    means = [s.mean for s in ips if not math.isnan(s.mean)]
    return StabilityReport(
        mean_level_aggregate(tensor, axis, fixed, which),
        rank_order_stability(tensor, axis, fixed, which, method),
        ips,
        float(np.mean(means)) if means else math.nan,
        permutation_variance(tensor),
    )


# -- significance ----------------------------------------------------------


@dataclass(frozen=True)
class SignificanceRow:
    dimension: str
    anova: stats.TestResult
    threshold: float
    significant: bool
    tukey: tuple[stats.PairwiseComparison, ...] = ()


def significance_grid(
    tensor: ScoreTensor,
    axis: str = "context",
    fixed: str | None = None,
    alpha: float = 0.05,
    which: str = "raw",
    post_hoc: bool = True,
    double_correction: bool = True,
    q_method: str = "quadrature",
) -> list[SignificanceRow]:
    """One-way ANOVA per dimension over conditions, Bonferroni-corrected.

    The threshold is ``alpha / n_dimensions``.  With ``double_correction``
    the Tukey comparisons are flagged at the same corrected threshold rather
    than at ``alpha``.
    """
    labels, v = tensor.conditions(axis, fixed, which)
    threshold = stats.bonferroni(alpha, len(tensor.dimensions))
    tukey_alpha = threshold if double_correction else alpha
    rows = []
    for m, d in enumerate(tensor.dimensions):
        groups = [_valid(v[c, :, m]) for c in range(len(labels))]
        res = stats.one_way_anova(groups, alpha=threshold)
        pairs: tuple = ()
        if post_hoc:
            pairs = tuple(stats.tukey_hsd(groups, tukey_alpha, labels, q_method))
        rows.append(SignificanceRow(d, res, threshold, res.p_value < threshold, pairs))
    return rows


# -- human baselines -------------------------------------------------------


def load_human_baselines(path: str | Path | None = None) -> dict[str, dict[str, dict[str, float | None]]]:
    """metric -> study -> key -> value (None for cells the source leaves empty)."""
    if path is None:
        text = resources.files("persona_probe").joinpath("data/baselines/human_baselines.csv").read_text()
    else:
        text = Path(path).read_text()
    out: dict[str, dict[str, dict[str, float | None]]] = {}
    for row in csv.DictReader(text.splitlines()):
        value = float(row["value"]) if row["value"].strip() else None
        out.setdefault(row["metric"], {}).setdefault(row["study"], {})[row["key"]] = value
    return out
