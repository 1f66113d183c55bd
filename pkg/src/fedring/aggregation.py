"""Combining client weight submissions into a new global model.

Two modes: plain arithmetic mean, and the standard federated average
weighted by each client's training-set size.  Weighted averaging with
identical counts reduces to the exact same arithmetic as the uniform mean,
so the two modes agree bitwise in that case.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    InvariantViolation,
    NonFiniteWeight,
    QuorumNotMet,
    ShapeMismatch,
    ZeroSampleCount,
)
from .protocol import WeightEntry, WeightSet


class AggregationMode(Enum):
    UNIFORM_MEAN = "uniform_mean"
    SAMPLE_WEIGHTED = "sample_weighted"


@dataclass(frozen=True)
class AggregationPolicy:
    mode: AggregationMode = AggregationMode.SAMPLE_WEIGHTED
    min_clients: int = 1

    def __post_init__(self):
        if self.min_clients < 1:
            raise InvariantViolation("min_clients must be >= 1")


def check_quorum(n_submitted: int, policy: AggregationPolicy) -> bool:
    return n_submitted >= policy.min_clients


def _check_aligned(submissions: list[WeightSet]) -> None:
    ref = submissions[0]
    for i, sub in enumerate(submissions[1:], start=1):
        if sub.names != ref.names:
            raise ShapeMismatch(
                f"submission {i} entry names differ from submission 0"
            )
        for a, b in zip(ref.entries, sub.entries):
            if a.shape != b.shape:
                raise ShapeMismatch(
                    f"entry {a.name!r}: shape {b.shape} != {a.shape} (submission {i})"
                )


def aggregate(submissions: list[WeightSet], policy: AggregationPolicy) -> WeightSet:
    """Average the submissions entry-wise into a new global WeightSet.

    Entries are reduced in submission-list order into a float64
    accumulator, so the result is deterministic for a fixed submission
    order.  The output sample_count is the sum of the inputs'.
    """
    if not check_quorum(len(submissions), policy):
        raise QuorumNotMet(
            f"{len(submissions)} submissions, need {policy.min_clients}"
        )
    _check_aligned(submissions)

    counts = [s.sample_count for s in submissions]
    k = len(submissions)
    if policy.mode is AggregationMode.SAMPLE_WEIGHTED:
        if any(c < 1 for c in counts):
            raise ZeroSampleCount(f"sample counts {counts} must all be >= 1")
        if len(set(counts)) == 1:
            # Identical counts: use the uniform weights so the two modes
            # agree exactly, not just within rounding.
            weights = [1.0 / k] * k
        else:
            total = float(sum(counts))
            weights = [c / total for c in counts]
    else:
        weights = [1.0 / k] * k

    for i, sub in enumerate(submissions):
        if not sub.all_finite():
            raise NonFiniteWeight(f"submission {i} contains NaN or Inf")

    out_entries = []
    for j, ref in enumerate(submissions[0].entries):
        acc = submissions[0].entries[j].data * weights[0]
        for i in range(1, k):
            acc += submissions[i].entries[j].data * weights[i]
        if not np.isfinite(acc).all():
            raise NonFiniteWeight(f"aggregated entry {ref.name!r} is non-finite")
        out_entries.append(WeightEntry(ref.name, ref.shape, acc))

    return WeightSet(tuple(out_entries), sample_count=sum(counts))
