"""Agreement metrics between metric scores and gold scores.

Segment-level agreement uses tie-aware Kendall tau-b, Spearman with mean
ranks, Pearson, and (optionally min-max normalized) MAE/MSE.  System-level
meta-evaluation combines pairwise ranking accuracy, Pearson over system
means, tie-calibrated segment accuracy (accuracy-t), and segment Pearson
into a single meta score (their plain mean).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

__all__ = [
    "MetricsError",
    "ScoreSeries",
    "aligned_values",
    "kendall_tau",
    "spearman",
    "pearson",
    "mae_mse",
    "system_pairwise_accuracy",
    "AccuracyT",
    "accuracy_t",
    "meta_score",
    "system_scores",
    "MetaReport",
    "meta_evaluate",
]

Key = tuple[str, str]


class MetricsError(ValueError):
    """Raised for degenerate inputs (mismatched keys, zero variance, ...)."""


@dataclass(frozen=True)
class ScoreSeries:
    """Scores keyed by (system, seg_id), the common currency of this module."""

    keys: tuple[Key, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.keys) != len(self.values):
            raise MetricsError("keys and values differ in length")
        if len(set(self.keys)) != len(self.keys):
            raise MetricsError("duplicate (system, seg_id) keys in score series")

    @classmethod
    def from_mapping(cls, mapping: Mapping[Key, float]) -> "ScoreSeries":
        items = sorted(mapping.items())
        return cls(
            keys=tuple(k for k, _ in items),
            values=tuple(float(v) for _, v in items),
        )

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, float]]) -> "ScoreSeries":
        mapping: dict[Key, float] = {}
        for system, seg_id, value in rows:
            key = (system, seg_id)
            if key in mapping:
                raise MetricsError(f"duplicate score row for {key!r}")
            mapping[key] = float(value)
        return cls.from_mapping(mapping)

    def as_dict(self) -> dict[Key, float]:
        return dict(zip(self.keys, self.values))

    def __len__(self) -> int:
        return len(self.keys)


def aligned_values(a: ScoreSeries, b: ScoreSeries) -> tuple[list[float], list[float]]:
    """Values of both series in shared sorted-key order; keys must coincide."""
    a_keys, b_keys = set(a.keys), set(b.keys)
    if a_keys != b_keys:
        only_a = sorted(a_keys - b_keys)[:5]
        only_b = sorted(b_keys - a_keys)[:5]
        raise MetricsError(
            f"score series keys differ; first only in left: {only_a}, "
            f"first only in right: {only_b}"
        )
    da, db = a.as_dict(), b.as_dict()
    order = sorted(a_keys)
    return [da[k] for k in order], [db[k] for k in order]


def _check_paired(a: Sequence[float], b: Sequence[float], minimum: int) -> None:
    if len(a) != len(b):
        raise MetricsError(f"series differ in length: {len(a)} vs {len(b)}")
    if len(a) < minimum:
        raise MetricsError(f"need at least {minimum} paired values, got {len(a)}")


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Tie-corrected Kendall tau-b over paired values."""
    _check_paired(a, b, 2)
    n = len(a)
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            da = a[i] - a[j]
            db = b[i] - b[j]
            prod = da * db
            if prod > 0:
                concordant += 1
            elif prod < 0:
                discordant += 1
    n0 = n * (n - 1) // 2
    ties_a = _tie_pair_count(a)
    ties_b = _tie_pair_count(b)
    denom_a = n0 - ties_a
    denom_b = n0 - ties_b
    if denom_a == 0 or denom_b == 0:
        raise MetricsError("kendall tau is undefined when one series is constant-tied")
    return (concordant - discordant) / math.sqrt(denom_a * denom_b)


def _tie_pair_count(values: Sequence[float]) -> int:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return sum(c * (c - 1) // 2 for c in counts.values())


def _mean_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties sharing their mean rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    _check_paired(a, b, 2)
    n = len(a)
    mean_a = sum(a) / n
    mean_b = sum(b) / n
    cov = var_a = var_b = 0.0
    for x, y in zip(a, b):
        dx = x - mean_a
        dy = y - mean_b
        cov += dx * dy
        var_a += dx * dx
        var_b += dy * dy
    if var_a == 0.0 or var_b == 0.0:
        raise MetricsError("pearson correlation is undefined for a constant series")
    return cov / math.sqrt(var_a * var_b)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson over mean ranks."""
    _check_paired(a, b, 2)
    return pearson(_mean_ranks(a), _mean_ranks(b))


def _minmax(values: Sequence[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.0] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def mae_mse(
    a: Sequence[float], b: Sequence[float], normalize: bool = True
) -> tuple[float, float]:
    """Mean absolute and mean squared error, min-max normalizing by default.

    Normalization maps each series independently onto [0, 1], so the errors
    compare shapes rather than raw scales; a constant series normalizes to
    all zeros.
    """
    _check_paired(a, b, 1)
    xs = _minmax(a) if normalize else list(a)
    ys = _minmax(b) if normalize else list(b)
    diffs = [x - y for x, y in zip(xs, ys)]
    mae = sum(abs(d) for d in diffs) / len(diffs)
    mse = sum(d * d for d in diffs) / len(diffs)
    return mae, mse


def system_pairwise_accuracy(
    metric_by_system: Mapping[str, float], gold_by_system: Mapping[str, float]
) -> float:
    """Share of system pairs ranked the same way by metric and gold.

    A pair tied on one side only counts as a disagreement; a pair tied on
    both sides counts as agreement.
    """
    if set(metric_by_system) != set(gold_by_system):
        raise MetricsError("metric and gold cover different systems")
    systems = sorted(metric_by_system)
    if len(systems) < 2:
        raise MetricsError("need at least two systems for pairwise accuracy")
    agree = total = 0
    for i in range(len(systems)):
        for j in range(i + 1, len(systems)):
            dm = metric_by_system[systems[i]] - metric_by_system[systems[j]]
            dg = gold_by_system[systems[i]] - gold_by_system[systems[j]]
            total += 1
            if (dm > 0 and dg > 0) or (dm < 0 and dg < 0) or (dm == 0 and dg == 0):
                agree += 1
    return agree / total


@dataclass(frozen=True)
class AccuracyT:
    value: float
    epsilon: float
    pairs: int

    def __float__(self) -> float:
        return self.value


def _seg_pairs(
    metric: ScoreSeries, gold: ScoreSeries
) -> list[tuple[float, float]]:
    """(metric delta, gold delta) for same-segment cross-system pairs."""
    dm, dg = metric.as_dict(), gold.as_dict()
    by_seg: dict[str, list[str]] = {}
    for system, seg_id in metric.keys:
        by_seg.setdefault(seg_id, []).append(system)
    pairs: list[tuple[float, float]] = []
    for seg_id in sorted(by_seg):
        systems = sorted(by_seg[seg_id])
        for i in range(len(systems)):
            for j in range(i + 1, len(systems)):
                ka, kb = (systems[i], seg_id), (systems[j], seg_id)
                pairs.append((dm[ka] - dm[kb], dg[ka] - dg[kb]))
    return pairs


def _accuracy_at(pairs: Sequence[tuple[float, float]], epsilon: float) -> float:
    correct = 0
    for dm, dg in pairs:
        metric_tie = abs(dm) <= epsilon
        gold_tie = dg == 0
        if gold_tie:
            correct += metric_tie
        else:
            correct += (not metric_tie) and ((dm > 0) == (dg > 0))
    return correct / len(pairs)


def accuracy_t(
    metric: ScoreSeries, gold: ScoreSeries, epsilon: float | None = None
) -> AccuracyT:
    """Tie-calibrated pairwise accuracy over same-segment system pairs.

    A metric difference within epsilon counts as a predicted tie.  When
    epsilon is not supplied it is chosen by grid search over the observed
    absolute metric differences (plus zero), maximizing accuracy and
    breaking ties toward the smallest epsilon.
    """
    aligned_values(metric, gold)  # validates key agreement
    pairs = _seg_pairs(metric, gold)
    if not pairs:
        raise MetricsError("no comparable same-segment system pairs")
    if epsilon is not None:
        if epsilon < 0:
            raise MetricsError("epsilon must be non-negative")
        return AccuracyT(value=_accuracy_at(pairs, epsilon), epsilon=epsilon, pairs=len(pairs))
    best_value = -1.0
    best_eps = 0.0
    for eps in sorted({0.0} | {abs(dm) for dm, _ in pairs}):
        value = _accuracy_at(pairs, eps)
        if value > best_value:
            best_value, best_eps = value, eps
    return AccuracyT(value=best_value, epsilon=best_eps, pairs=len(pairs))


def meta_score(components: Sequence[float]) -> float:
    """Mean of the four meta-evaluation components."""
    if len(components) != 4:
        raise MetricsError(f"meta score takes exactly 4 components, got {len(components)}")
    return math.fsum(components) / 4


def system_scores(series: ScoreSeries) -> dict[str, float]:
    totals: dict[str, list[float]] = {}
    for (system, _), value in zip(series.keys, series.values):
        totals.setdefault(system, []).append(value)
    return {system: sum(vals) / len(vals) for system, vals in sorted(totals.items())}


@dataclass(frozen=True)
class MetaReport:
    system_pairwise_accuracy: float
    system_pearson: float
    segment_accuracy_t: float
    segment_pearson: float
    meta: float
    epsilon: float
    pairs: int

    def components(self) -> tuple[float, float, float, float]:
        return (
            self.system_pairwise_accuracy,
            self.system_pearson,
            self.segment_accuracy_t,
            self.segment_pearson,
        )


def meta_evaluate(
    metric: ScoreSeries, gold: ScoreSeries, epsilon: float | None = None
) -> MetaReport:
    """The four-component meta-evaluation and its mean."""
    ma, ga = aligned_values(metric, gold)
    metric_sys = system_scores(metric)
    gold_sys = system_scores(gold)
    sys_acc = system_pairwise_accuracy(metric_sys, gold_sys)
    systems = sorted(metric_sys)
    sys_pearson = pearson(
        [metric_sys[s] for s in systems], [gold_sys[s] for s in systems]
    )
    acc_t = accuracy_t(metric, gold, epsilon)
    seg_pearson = pearson(ma, ga)
    components = (sys_acc, sys_pearson, acc_t.value, seg_pearson)
    return MetaReport(
        system_pairwise_accuracy=sys_acc,
        system_pearson=sys_pearson,
        segment_accuracy_t=acc_t.value,
        segment_pearson=seg_pearson,
        meta=meta_score(components),
        epsilon=acc_t.epsilon,
        pairs=acc_t.pairs,
    )
