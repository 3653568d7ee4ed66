"""Ring-allreduce schedule over committees, fold semantics, and the oracle.

One iteration runs K = n/c rotating partial-aggregation streams, one
initiated per committee. During the reduce phase each stream makes K-1
clockwise hops and every committee folds a scheduled slice of its local
gradients into whichever stream it currently holds. During the gather
phase the finalized streams make K-1 further hops and are committed
verbatim. Per committee that is exactly 2(K-1) inter-committee handoffs
per iteration; a single committee is its own neighbor and never hands off.

Folds are count-weighted for the mean rule so the chained partial means
equal the flat mean of every selected gradient, and the final combine of
the K stream values is always the count-weighted mean in canonical stream
order, the well-defined merge of disjoint partial aggregates.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .aggregation import AggregationResult, AggregatorSpec, Gradient, aggregate, mean


def default_gradients_per_step(committee_size: int, nodes: int) -> int:
    """Default selection size per consensus step: max(1, round(c^2 / n))."""
    return max(1, int(round(committee_size ** 2 / nodes)))


def visit_quotas(committee_size: int, committees: int) -> list[int]:
    """Split a committee's c local gradients over its K reduce visits.

    Front-loaded so the stream-initiating visit is never empty; visits with
    quota zero simply pass the incoming stream through.
    """
    base, extra = divmod(committee_size, committees)
    return [base + (1 if i < extra else 0) for i in range(committees)]


def chunk_quota(quota: int, gradients_per_step: int) -> list[int]:
    """Split one visit's quota into consensus-step selections."""
    if quota == 0:
        return [0]
    out = []
    left = quota
    while left > 0:
        take = min(gradients_per_step, left)
        out.append(take)
        left -= take
    return out


@dataclass(frozen=True)
class StreamValue:
    """A partial aggregation travelling the ring."""

    stream_id: int
    values: np.ndarray
    count: int              # raw gradients folded in so far
    payload_bytes: int
    report: Optional[AggregationResult] = field(default=None, compare=False,
                                                repr=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update(f"|{self.count}|{self.stream_id}".encode())
        return h.hexdigest()[:16]

    def as_gradient(self, iteration: int = 0) -> Gradient:
        return Gradient(values=self.values, payload_bytes=self.payload_bytes,
                        origin=("stream", self.stream_id), iteration=iteration)


def fold(spec: AggregatorSpec, selection: Sequence[Gradient],
         incoming: Optional[StreamValue], stream_id: int) -> StreamValue:
    """One consensus step's aggregation: selection plus the held stream."""
    if not selection and incoming is None:
        raise ValueError("fold needs a selection or an incoming stream")
    if not selection:
        return StreamValue(stream_id, incoming.values, incoming.count,
                           incoming.payload_bytes)
    inputs = list(selection)
    counts = [1] * len(inputs)
    if incoming is not None:
        inputs.append(incoming.as_gradient(selection[0].iteration))
        counts.append(incoming.count)
    result = aggregate(spec, inputs, counts=counts)
    return StreamValue(stream_id, result.gradient.values, sum(counts),
                       max(g.payload_bytes for g in inputs), report=result)


def combine_finals(finals: Sequence[StreamValue]) -> np.ndarray:
    """Merge the K finalized streams, in canonical stream order, locally."""
    ordered = sorted(finals, key=lambda s: s.stream_id)
    if len(ordered) == 1:
        return ordered[0].values
    grads = [s.as_gradient() for s in ordered]
    counts = [s.count for s in ordered]
    return mean(grads, counts=counts).values


def oracle_aggregate(spec: AggregatorSpec,
                     selections: Sequence[Sequence[Sequence[Sequence[Gradient]]]]
                     ) -> np.ndarray:
    """Centralized replay of one iteration's fold order.

    selections[k][r] lists committee k's visit-r consensus-step selections in
    commit order. Stream s starts at committee s and is folded by committee
    (s + r) mod K at reduce round r.
    """
    committees = len(selections)
    finals = []
    for s in range(committees):
        stream: Optional[StreamValue] = None
        for r in range(committees):
            k = (s + r) % committees
            for chunk in selections[k][r]:
                if not chunk and stream is None:
                    continue
                stream = fold(spec, chunk, stream, s)
        if stream is None:
            raise ValueError(f"stream {s} never received any gradients")
        finals.append(stream)
    return combine_finals(finals)


def expected_handoffs(nodes: int, committee_size: int) -> int:
    """Per-committee inter-committee handoffs in one complete iteration."""
    return 2 * (nodes // committee_size - 1)
