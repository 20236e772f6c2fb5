"""Scoring and cost-effectiveness analytics.

Concept error rate via edit-distance alignment, exact-tuple intent accuracy,
and the energy cost comparisons: kWh per metric point, relative cost
reduction, relative performance delta and CO2 conversion.

Metric values stored on :class:`ExperimentRecord` follow the percent
convention (CER 22.51 means 22.51 %). The functions that score raw outputs
(:func:`concept_error_rate`) return fractions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

DEFAULT_CO2_G_PER_KWH = 51.0

ERROR_RATE = "error_rate"
ACCURACY = "accuracy"
METRIC_KINDS = (ERROR_RATE, ACCURACY)


class MetricError(ValueError):
    """Raised for invalid metric inputs (empty references, kind mismatch...)."""


@dataclass(frozen=True)
class AlignmentStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    hits: int = 0
    gold_len: int = 0

    def __post_init__(self) -> None:
        counts = (self.substitutions, self.insertions, self.deletions, self.hits, self.gold_len)
        if any(c < 0 for c in counts):
            raise MetricError(f"negative alignment count in {self}")
        if self.hits + self.substitutions + self.deletions != self.gold_len:
            raise MetricError(f"inconsistent alignment counts: {self}")

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: AlignmentStats) -> AlignmentStats:
        return AlignmentStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.hits + other.hits,
            self.gold_len + other.gold_len,
        )


def align_concepts(gold: Sequence[Hashable], pred: Sequence[Hashable]) -> AlignmentStats:
    """Align two label sequences with unit-cost Levenshtein edits.

    Among minimum-cost alignments, the one with the most hits is reported
    (then fewest substitutions), so counts are deterministic.
    """
    n, m = len(gold), len(pred)
    # Each cell packs (cost, -hits, subs) into one int: cost * w^2 - hits * w + subs.
    # All three are additive along a path and w > n + 1 keeps the packing
    # order-preserving, so int min() is the lexicographic min.
    w = n + m + 2
    step = w * w
    hit = -w
    sub = step + 1
    prev = [j * step for j in range(m + 1)]
    for i in range(1, n + 1):
        g = gold[i - 1]
        left = i * step
        cur = [left]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (hit if g == pred[j - 1] else sub)
            up = prev[j] + step
            left = left + step
            if up < left:
                left = up
            if diag < left:
                left = diag
            cur.append(left)
        prev = cur
    key = prev[m]
    subs = key % w
    q = (key - subs) // w
    hits = (-q) % w
    cost = (q + hits) // w
    ins = m - hits - subs
    dels = n - hits - subs
    assert ins + dels + subs == cost
    return AlignmentStats(subs, ins, dels, hits, n)


def corpus_alignment(pairs: Iterable[tuple[Sequence[Hashable], Sequence[Hashable]]]) -> AlignmentStats:
    """Sum per-utterance alignment counts over ``(gold, pred)`` pairs."""
    total = AlignmentStats()
    for gold, pred in pairs:
        total = total + align_concepts(gold, pred)
    return total


def concept_error_rate(stats: AlignmentStats | Iterable[AlignmentStats]) -> float:
    """(S + I + D) / N as a fraction; corpus counts are summed before dividing."""
    if not isinstance(stats, AlignmentStats):
        total = AlignmentStats()
        for s in stats:
            total = total + s
        stats = total
    if stats.gold_len == 0:
        raise MetricError("empty reference: no gold concepts to score against")
    return stats.errors / stats.gold_len


def intent_accuracy(pairs: Sequence[tuple[Sequence[Hashable], Sequence[Hashable]]]) -> float:
    """Percent of (gold, pred) intents matching on every attribute."""
    if not pairs:
        raise MetricError("no samples")
    correct = sum(1 for gold, pred in pairs if tuple(gold) == tuple(pred))
    return 100.0 * correct / len(pairs)


@dataclass(frozen=True)
class ExperimentRecord:
    """One trained model's row in a cost table. Metrics are percents."""

    id: str
    strategy: str
    input_features: str
    param_count: int
    kwh: float
    grams_co2: int
    wall_time_s: float
    dev_metric: float
    test_metric: float
    metric_kind: str = ERROR_RATE
    external_param_count: int | None = None

    def __post_init__(self) -> None:
        if self.metric_kind not in METRIC_KINDS:
            raise MetricError(f"unknown metric_kind {self.metric_kind!r}")
        if self.kwh < 0 or self.wall_time_s < 0 or self.grams_co2 < 0:
            raise MetricError(f"record {self.id!r}: energy and time must be nonnegative")
        for value in (self.dev_metric, self.test_metric):
            if self.metric_kind == ERROR_RATE and value < 0:
                raise MetricError(f"record {self.id!r}: error rate must be >= 0")
            if self.metric_kind == ACCURACY and not 0.0 <= value <= 100.0:
                raise MetricError(f"record {self.id!r}: accuracy must lie in [0, 100]")


class KwhPerPointKind(enum.Enum):
    FINITE = "finite"
    INFINITE = "infinite"
    REFERENCE = "reference"
    UNDEFINED = "undefined"


@dataclass(frozen=True)
class KwhPerPoint:
    kind: KwhPerPointKind
    value: float | None = None
    reason: str | None = None

    @classmethod
    def finite(cls, value: float) -> KwhPerPoint:
        if value < 0:
            raise MetricError("kWh/p cannot be negative")
        return cls(KwhPerPointKind.FINITE, value)

    @classmethod
    def infinite(cls) -> KwhPerPoint:
        return cls(KwhPerPointKind.INFINITE)

    @classmethod
    def reference(cls) -> KwhPerPoint:
        return cls(KwhPerPointKind.REFERENCE)

    @classmethod
    def undefined(cls, reason: str) -> KwhPerPoint:
        return cls(KwhPerPointKind.UNDEFINED, reason=reason)

    def format(self, decimals: int = 3) -> str:
        if self.kind is KwhPerPointKind.FINITE:
            return f"{self.value:.{decimals}f}"
        if self.kind is KwhPerPointKind.INFINITE:
            return "inf"
        if self.kind is KwhPerPointKind.REFERENCE:
            return "M2"
        return "-"

    def __str__(self) -> str:
        return self.format()


def _check_same_kind(a: ExperimentRecord, b: ExperimentRecord) -> None:
    if a.metric_kind != b.metric_kind:
        raise MetricError(
            f"metric kind mismatch: {a.id!r} is {a.metric_kind}, {b.id!r} is {b.metric_kind}"
        )


def _improvement(better: ExperimentRecord, worse: ExperimentRecord) -> float:
    """Metric points gained by ``better`` over ``worse`` (sign-aware per kind)."""
    if better.metric_kind == ERROR_RATE:
        return worse.test_metric - better.test_metric
    return better.test_metric - worse.test_metric


def kwh_per_point(m1: ExperimentRecord, m2: ExperimentRecord) -> KwhPerPoint:
    """Extra kWh spent by the more expensive model per point of test metric gained.

    Roles are swapped when ``m1`` is the cheaper one. A more expensive model
    that is not better gets the infinite value; equal cost gives zero.
    """
    _check_same_kind(m1, m2)
    if m1.kwh < m2.kwh:
        m1, m2 = m2, m1
    extra = m1.kwh - m2.kwh
    gain = _improvement(m1, m2)
    if extra == 0:
        return KwhPerPoint.finite(0.0)
    if gain <= 0:
        return KwhPerPoint.infinite()
    return KwhPerPoint.finite(extra / gain)


def select_reference(group: Sequence[ExperimentRecord]) -> ExperimentRecord:
    """Cheapest record of a same-input group; ties go to the smallest id."""
    if not group:
        raise MetricError("cannot select a reference from an empty group")
    features = {r.input_features for r in group}
    if len(features) > 1:
        raise MetricError(f"group mixes input features: {sorted(features)}")
    return min(group, key=lambda r: (r.kwh, r.id))


def group_by_features(records: Iterable[ExperimentRecord]) -> dict[str, list[ExperimentRecord]]:
    groups: dict[str, list[ExperimentRecord]] = {}
    for r in records:
        groups.setdefault(r.input_features, []).append(r)
    return groups


def compare_group(group: Sequence[ExperimentRecord]) -> dict[str, KwhPerPoint]:
    """kWh/p of every record against the group's cheapest record.

    Singleton groups have nobody to compare against and yield the
    undefined value (rendered ``-``).
    """
    ref = select_reference(group)
    if len(group) == 1:
        return {ref.id: KwhPerPoint.undefined("singleton group")}
    out = {}
    for r in group:
        out[r.id] = KwhPerPoint.reference() if r.id == ref.id else kwh_per_point(r, ref)
    return out


def relative_cost_reduction(expensive: ExperimentRecord, cheap: ExperimentRecord) -> float:
    """Percent of the expensive model's kWh saved by the cheap one."""
    if expensive.kwh <= 0:
        raise MetricError(f"record {expensive.id!r} has zero kWh; reduction undefined")
    return 100.0 * (expensive.kwh - cheap.kwh) / expensive.kwh


def relative_performance_delta(reference: ExperimentRecord, other: ExperimentRecord) -> float:
    """Signed percent performance change of ``other``; positive means a loss."""
    _check_same_kind(reference, other)
    if reference.test_metric <= 0:
        raise MetricError(f"record {reference.id!r} has a non-positive test metric")
    if reference.metric_kind == ERROR_RATE:
        diff = other.test_metric - reference.test_metric
    else:
        diff = reference.test_metric - other.test_metric
    return 100.0 * diff / reference.test_metric


def grams_co2(kwh: float, coefficient: float = DEFAULT_CO2_G_PER_KWH) -> int:
    """Grams of CO2 for ``kwh`` at ``coefficient`` g/kWh, rounded half-up."""
    if kwh < 0:
        raise MetricError(f"negative energy: {kwh}")
    if coefficient <= 0:
        raise MetricError(f"coefficient must be positive, got {coefficient}")
    return int(math.floor(kwh * coefficient + 0.5))
