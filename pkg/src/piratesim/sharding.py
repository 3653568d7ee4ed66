"""Committee formation, the cuckoo reassignment rule, and credit tracking.

Node ids are opaque integers. A committee assignment is valid when every
admitted node sits in exactly one committee and every committee has exactly
c members; committee list order is the ring order and member list order is
the round-robin order used by consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


@dataclass(frozen=True)
class NodeProfile:
    node_id: int
    compute_score: float          # normalized [0, 1]
    uplink_mbps: float
    credit_history: tuple[float, ...] = ()


@dataclass(frozen=True)
class AdmissionPolicy:
    compute_weight: float = 0.4
    uplink_weight: float = 0.3
    credit_weight: float = 0.3
    threshold: float = 0.5
    uplink_range: tuple[float, float] = (80.0, 240.0)
    neutral_credit: float = 0.5   # used when a node has no credit history
    credit_window: int = 3


@dataclass(frozen=True)
class CreditPolicy:
    floor: float = 0.2
    window: int = 3


def assess(profile: NodeProfile, policy: AdmissionPolicy = AdmissionPolicy()
           ) -> tuple[bool, float]:
    """Score a candidate; admit when the weighted reliability clears the bar.

    reliability = 0.4*compute + 0.3*normalized uplink + 0.3*mean recent credit.
    """
    lo, hi = policy.uplink_range
    uplink_norm = min(1.0, max(0.0, (profile.uplink_mbps - lo) / (hi - lo)))
    recent = profile.credit_history[-policy.credit_window:]
    credit = float(np.mean(recent)) if recent else policy.neutral_credit
    reliability = (policy.compute_weight * profile.compute_score
                   + policy.uplink_weight * uplink_norm
                   + policy.credit_weight * credit)
    return reliability >= policy.threshold, reliability


@dataclass
class CommitteeAssignment:
    committee_size: int
    committees: list[list[int]]

    def validate(self) -> None:
        seen: set[int] = set()
        for idx, members in enumerate(self.committees):
            if len(members) != self.committee_size:
                raise ValueError(
                    f"committee {idx} has {len(members)} members, expected {self.committee_size}")
            for m in members:
                if m in seen:
                    raise ValueError(f"node {m} appears in more than one committee")
                seen.add(m)

    def committee_of(self, node_id: int) -> int:
        for idx, members in enumerate(self.committees):
            if node_id in members:
                return idx
        raise KeyError(node_id)

    def all_members(self) -> list[int]:
        return [m for c in self.committees for m in c]


def form_committees(node_ids: Iterable[int], committee_size: int,
                    rng: np.random.Generator) -> CommitteeAssignment:
    """Seeded uniform shuffle, then consecutive blocks of c."""
    ids = list(node_ids)
    if committee_size < 1:
        raise ValueError("committee size must be >= 1")
    if len(ids) % committee_size != 0:
        raise ValueError(
            f"{len(ids)} nodes not divisible by committee size {committee_size}")
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    committees = [shuffled[i:i + committee_size]
                  for i in range(0, len(shuffled), committee_size)]
    out = CommitteeAssignment(committee_size, committees)
    out.validate()
    return out


def remove_node(assignment: CommitteeAssignment, node_id: int) -> None:
    """Drop a departing node, leaving its committee one member short."""
    idx = assignment.committee_of(node_id)
    assignment.committees[idx].remove(node_id)


def cuckoo_reassign(assignment: CommitteeAssignment, joining: int,
                    rng: np.random.Generator, k_evict: int = 1) -> None:
    """Cuckoo-rule join: random placement, random evictions, rebalance.

    The joiner lands in a uniformly random committee; k_evict randomly
    chosen incumbents of that committee are pushed into uniformly random
    other committees; then single-member moves cascade from over-full to
    under-full committees until every committee is back at size c. The final
    state is validated whenever the total membership allows it.
    """
    k = len(assignment.committees)
    if k == 0:
        raise ValueError("no committees to join")
    target = int(rng.integers(k))
    home = assignment.committees[target]
    evicted: list[int] = []
    for _ in range(min(k_evict, len(home))):
        evicted.append(home.pop(int(rng.integers(len(home)))))
    home.append(joining)
    for node in evicted:
        if k == 1:
            home.append(node)
            continue
        other = int(rng.integers(k - 1))
        if other >= target:
            other += 1
        assignment.committees[other].append(node)
    _rebalance(assignment, rng)
    total = sum(len(c) for c in assignment.committees)
    if total == k * assignment.committee_size:
        assignment.validate()


def _rebalance(assignment: CommitteeAssignment, rng: np.random.Generator) -> None:
    c = assignment.committee_size
    while True:
        over = [i for i, mem in enumerate(assignment.committees) if len(mem) > c]
        under = [i for i, mem in enumerate(assignment.committees) if len(mem) < c]
        if not over or not under:
            return
        src = over[int(rng.integers(len(over)))]
        dst = under[int(rng.integers(len(under)))]
        members = assignment.committees[src]
        moved = members.pop(int(rng.integers(len(members))))
        assignment.committees[dst].append(moved)


def apply_churn(assignment: CommitteeAssignment, leaving: Iterable[int],
                joining: Iterable[int], rng: np.random.Generator,
                k_evict: int = 1) -> None:
    """One epoch of churn: process departures, then cuckoo-join arrivals."""
    for node in leaving:
        remove_node(assignment, node)
    for node in joining:
        cuckoo_reassign(assignment, node, rng, k_evict=k_evict)


class CreditLedger:
    """Per-node (epoch, score) records driving reconfiguration decisions."""

    def __init__(self) -> None:
        self.records: dict[int, list[tuple[int, float]]] = {}
        self.warnings: list[str] = []

    def register(self, node_id: int) -> None:
        self.records.setdefault(node_id, [])

    def update_credit(self, scores: dict[int, float], epoch: int) -> None:
        """Append one epoch of committed detection-weight means."""
        for node_id, score in scores.items():
            if node_id not in self.records:
                self.warnings.append(f"credit update for unknown node {node_id}")
                continue
            self.records[node_id].append((epoch, float(score)))

    def mean_recent(self, node_id: int, window: int) -> Optional[float]:
        recs = self.records.get(node_id, [])
        if not recs:
            return None
        tail = recs[-window:]
        return float(np.mean([v for _, v in tail]))

    def evict_low_credit(self, policy: CreditPolicy = CreditPolicy()) -> set[int]:
        """Nodes whose mean credit over the last `window` epochs sits under
        the floor. Nodes with no records yet are never evicted."""
        out: set[int] = set()
        for node_id in self.records:
            m = self.mean_recent(node_id, policy.window)
            if m is not None and m < policy.floor:
                out.add(node_id)
        return out

    def credit_tuple(self, node_id: int) -> tuple[float, ...]:
        return tuple(v for _, v in self.records.get(node_id, []))
