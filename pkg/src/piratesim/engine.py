"""End-to-end simulation of the sharded, chain-protected SGD protocol.

One iteration per committee: members gossip their local gradients, then the
committee folds its scheduled selections into the rotating streams through
chained-consensus steps. A visit's final fold commit triggers the handoff
of the stream to the neighbor committee; finalized streams are gathered
around the ring, committed verbatim, and every node combines the K stream
values into the same model update.

The engine owns the ground truth (who is byzantine, everyone's submitted
gradients, the canonical fold replay) and uses it for bookkeeping, metrics,
and honest-leader payload construction; validators still recompute every
fold from their own received copies, so a falsified aggregation is caught
by real recomputation, not by consulting ground truth.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import adversary as adv
from .aggregation import AggregatorSpec, Gradient
from .allreduce import StreamValue, chunk_quota, combine_finals, fold, visit_quotas
from .config import STREAM_IDS, RunConfig, rng_stream
from .consensus import (Block, CommitteeReplica, MisbehaviorReport,
                        QuorumCertificate, StepPayload, StorageTracker,
                        view_timeout_s)
from .metrics import MetricsRow
from .netsim import LinkProfile, SimClock, SimEvent
from .sharding import CreditLedger, CreditPolicy, form_committees
from .training import (ModelState, apply_update, local_gradient, make_task,
                       stable_learning_rate)


@dataclass(frozen=True)
class StepDescriptor:
    """One scheduled consensus step of a committee's iteration."""

    index: int                      # position in the committee's step order
    kind: str                       # "reduce" | "gather"
    stream_id: int
    visit: int
    chunk: int
    slots: tuple[int, ...]          # contributing member node ids
    consumes_seq: Optional[int]     # handoff sequence this step folds/commits
    visit_final: bool
    hops: int = 0                   # gather only


@dataclass
class HandoffRecord:
    """A stream value crossing a committee boundary, with its certificate."""

    iteration: int
    seq: int
    stream: StreamValue
    qc: QuorumCertificate
    block: Block
    hops: int


@dataclass
class CommitteeInfo:
    index: int
    members: tuple[int, ...]
    steps: list[StepDescriptor]
    view_timeout: float


@dataclass
class RunResult:
    config: RunConfig
    rows: list[MetricsRow]
    final_params: np.ndarray
    final_loss: float
    trace_digest: str
    truncated: bool
    iteration_times: list[float]
    update_log: list[np.ndarray]
    selections_log: list[list[list[list[list[Gradient]]]]]
    peak_retained_bytes: int
    transient_peak_bytes: int
    handoff_log: list[tuple[int, int, int, int]]   # iteration, committee, seq, sender
    committee_members: list[tuple[int, ...]]
    byzantine_nodes: tuple[int, ...]
    committed_sequences: dict[int, list[str]]
    liveness_log: list[dict]
    step_weight_log: list[tuple[int, int, dict[int, float]]]
    misbehavior: list[MisbehaviorReport]
    qc_conflicts: int
    falsified_commits: int
    fallback_queries: int
    timeouts_fired: int
    evictions_total: int
    skipped_updates: int
    committed_payload_blocks: int
    credit_records: dict[int, list[tuple[int, float]]]


class _Node:
    """Engine-side runtime state of one protocol participant."""

    def __init__(self, node_id: int, committee: CommitteeInfo, index: int,
                 link: LinkProfile, tracker: StorageTracker):
        self.id = node_id
        self.committee = committee
        self.index = index
        self.link = link
        self.tracker = tracker
        self.replica: Optional[CommitteeReplica] = None
        self.strategy: Optional[adv.ByzantineStrategy] = None
        self.model_offset: Optional[np.ndarray] = None
        self.gradient: Optional[Gradient] = None
        self.reset_iteration_state()

    def reset_iteration_state(self) -> None:
        self.gossip: dict[int, Gradient] = {}
        self.fold_local: dict[tuple[int, int], StreamValue] = {}
        self.handoffs: dict[int, HandoffRecord] = {}
        self.sent_log: "OrderedDict[int, HandoffRecord]" = OrderedDict()
        self.pending: list[tuple[Block, int]] = []
        self.finals: dict[int, StreamValue] = {}
        self.committed_steps: set[str] = set()
        self.committed_payload_count = 0
        self.handoff_sent: set[int] = set()
        self.done = False
        self.last_proposed_view = -1
        self.query_armed: Optional[int] = None


class PirateEngine:
    """Builds and runs one configured simulation."""

    def __init__(self, cfg: RunConfig):
        if cfg.protocol != "pirate":
            raise ValueError("engine requires protocol 'pirate'")
        self.cfg = cfg
        self.clock = SimClock()
        self.payload_bytes = cfg.payload_bytes
        self.control_bytes = cfg.consensus.control_bytes
        self.spec = AggregatorSpec(
            kind=cfg.aggregator.kind, f=cfg.aggregator.f, m=cfg.aggregator.m,
            l=cfg.aggregator.l if cfg.aggregator.l is not None else 1,
            detection_threshold=cfg.aggregator.detection_threshold)
        self.k_committees = cfg.committees
        self.g_s = cfg.gradients_per_step()

        self.rng_query = rng_stream(cfg.seed, "fallback-query")
        self.rng_adversary = rng_stream(cfg.seed, "adversary")
        self.rng_batch = rng_stream(cfg.seed, "batch")
        rng_uplinks = rng_stream(cfg.seed, "uplinks")
        rng_committees = rng_stream(cfg.seed, "committees")

        net = cfg.network
        self.links = [LinkProfile(
            uplink_mbps=float(rng_uplinks.uniform(net.uplink_mbps_min,
                                                  net.uplink_mbps_max)),
            downlink_mbps=net.downlink_mbps, latency_ms=net.latency_ms)
            for _ in range(cfg.nodes)]

        self.task = make_task(
            cfg.training.task, cfg.nodes, cfg.training.dimension,
            cfg.training.samples_per_node,
            np.random.SeedSequence((cfg.seed, STREAM_IDS["task-data"])),
            noise_std=cfg.training.noise_std, sharding=cfg.training.sharding)
        self.model = ModelState(params=np.zeros(cfg.training.dimension))
        self.lr = (cfg.training.learning_rate
                   if cfg.training.learning_rate is not None
                   else stable_learning_rate(self.task))

        assignment = form_committees(range(cfg.nodes), cfg.committee_size,
                                     rng_committees)
        self.committees: list[CommitteeInfo] = []
        for k, members in enumerate(assignment.committees):
            members_t = tuple(members)
            slowest = min(self.links[m].uplink_mbps for m in members_t)
            timeout = view_timeout_s(cfg.committee_size, self.payload_bytes,
                                     slowest, net.latency_ms / 1000.0,
                                     cfg.consensus.timeout_factor)
            self.committees.append(CommitteeInfo(
                index=k, members=members_t,
                steps=self._build_schedule(k, members_t),
                view_timeout=timeout))

        self.byzantine = tuple(sorted(self._pick_byzantine()))

        self.nodes: dict[int, _Node] = {}
        for committee in self.committees:
            for idx, m in enumerate(committee.members):
                node = _Node(m, committee, idx, self.links[m],
                             StorageTracker(m, self.payload_bytes))
                if m in self.byzantine:
                    node.strategy = self._make_strategy()
                self.nodes[m] = node
                self.clock.register_node(m, self.links[m],
                                         self._make_handler(node))
        for node in self.nodes.values():
            node.replica = self._make_replica(node)

        self.ledger = CreditLedger()
        for m in sorted(self.nodes):
            self.ledger.register(m)
        self.credit_policy = CreditPolicy(floor=cfg.sharding.credit_floor,
                                          window=cfg.sharding.credit_window)
        self.evicted: set[int] = set()

        # run-wide state
        self.iteration = 0
        self.rows: list[MetricsRow] = []
        self.iteration_times: list[float] = []
        self.update_log: list[np.ndarray] = []
        self.selections_log: list[list[list[list[list[Gradient]]]]] = []
        self.handoff_log: list[tuple[int, int, int, int]] = []
        self.liveness_log: list[dict] = []
        self.step_weight_log: list[tuple[int, int, dict[int, float]]] = []
        self.misbehavior: list[MisbehaviorReport] = []
        self.fallback_queries = 0
        self.evictions_total = 0
        self.committed_payload_total = 0
        self.qc_conflicts = 0
        self._qc_seen: dict[tuple[int, int], set[str]] = {}
        self._iteration_started_at = 0.0
        self._done_count = 0
        self._committee_first_commit: dict[int, set[str]] = {}
        self._committee_commit_views: dict[int, set[int]] = {}
        self._committee_start_view: dict[int, int] = {}
        self._rejected_reports: dict[str, set[int]] = {}
        self._rejected_counted: set[str] = set()
        self._iter_committed = 0
        self._iter_evictions = 0
        self._iter_scores: dict[int, list[float]] = {}
        self._epoch_scores: dict[int, list[float]] = {}
        # canonical per-iteration ground truth
        self._canonical_model_digest = ""
        self._canonical: dict[tuple[int, int], StepPayload] = {}
        self._canonical_digest: dict[tuple[int, int], str] = {}
        self._canonical_streams: dict[tuple[int, int], StreamValue] = {}
        self._canonical_finals: list[StreamValue] = []
        self._canonical_sets: dict[int, set[str]] = {}
        self.falsified_commits = 0

    # -- construction helpers -----------------------------------------------

    def _build_schedule(self, k: int, members: tuple[int, ...]
                        ) -> list[StepDescriptor]:
        c = self.cfg.committee_size
        K = self.k_committees
        quotas = visit_quotas(c, K)
        steps: list[StepDescriptor] = []
        pointer = 0
        for r in range(K):
            chunks = chunk_quota(quotas[r], self.g_s)
            stream = (k - r) % K
            for j, take in enumerate(chunks):
                slots = members[pointer:pointer + take]
                pointer += take
                steps.append(StepDescriptor(
                    index=len(steps), kind="reduce", stream_id=stream,
                    visit=r, chunk=j, slots=tuple(slots),
                    consumes_seq=(r - 1) if (r > 0 and j == 0) else None,
                    visit_final=(j == len(chunks) - 1)))
        for g in range(1, K):
            stream = (k - g + 1) % K
            steps.append(StepDescriptor(
                index=len(steps), kind="gather", stream_id=stream,
                visit=K - 1 + g, chunk=0, slots=(),
                consumes_seq=K - 2 + g, visit_final=False, hops=g))
        return steps

    def _pick_byzantine(self) -> set[int]:
        count = self.cfg.adversary.count
        if count == 0:
            return set()
        chosen = self.rng_adversary.choice(self.cfg.nodes, size=count,
                                           replace=False)
        return {int(x) for x in chosen}

    def _make_strategy(self) -> adv.ByzantineStrategy:
        a = self.cfg.adversary
        return adv.ByzantineStrategy(
            kind=a.strategy, magnitude=a.magnitude, target_kind=a.target_kind,
            target_vector=(np.asarray(a.target_vector, dtype=np.float64)
                           if a.target_vector is not None else None),
            noise_scale=a.noise_scale,
            contaminate_at_iteration=a.contaminate_at_iteration)

    def _make_handler(self, node: _Node):
        def handler(event: SimEvent) -> None:
            self._dispatch(node, event)
        return handler

    def _make_replica(self, node: _Node) -> CommitteeReplica:
        committee = node.committee

        def send(dest: int, size: int, tag: str, payload: object) -> None:
            if (adv.withholds(node.strategy)
                    and tag in ("vote", "new-view", "qc")):
                return
            self.clock.send(node.id, dest, size, tag, payload)

        def set_timer(delay: float, tag: str, payload: object):
            return self.clock.schedule_timer(delay, node.id, tag, payload)

        replica = CommitteeReplica(
            node.id, committee.members,
            now=lambda: self.clock.now,
            send=send,
            set_timer=set_timer,
            cancel_timer=self.clock.cancel,
            view_timeout=committee.view_timeout,
            validate_payload=lambda block: self._validate_payload(node, block),
            on_commit=lambda block: self._on_commit(node, block),
            on_qc=lambda qc: self._on_qc(node, qc),
            on_ready=lambda view: self._maybe_propose(node),
            on_misbehavior=lambda rep: self._on_misbehavior(node, rep),
            request_block=lambda digest, holder: self.clock.send(
                node.id, holder, self.control_bytes, "block-request", digest),
            control_bytes=self.control_bytes,
            gst_s=self.cfg.consensus.gst_s,
            pre_gst_timeout_scale=self.cfg.consensus.pre_gst_timeout_scale,
            vote_all=adv.equivocates(node.strategy))
        replica.halt()
        return replica

    # -- per-node model view --------------------------------------------------

    def _node_params(self, node: _Node) -> np.ndarray:
        if node.model_offset is None:
            return self.model.params
        return self.model.params + node.model_offset

    def _node_model_digest(self, node: _Node) -> str:
        if node.model_offset is None:
            return self._canonical_model_digest
        return ModelState(self._node_params(node)).digest()

    # -- iteration ground truth -----------------------------------------------

    def _prepare_iteration(self) -> None:
        """Compute every node's submission and the canonical fold replay."""
        cfg = self.cfg
        self._canonical_model_digest = self.model.digest()
        honest: dict[int, Gradient] = {}
        for m in sorted(self.nodes):
            node = self.nodes[m]
            strat = node.strategy
            if (strat is not None and strat.kind == "contaminate-model"
                    and self.iteration == strat.contaminate_at_iteration + 1):
                perturbed = adv.contaminate_model(
                    self._node_params(node), strat, self.rng_adversary)
                node.model_offset = perturbed - self.model.params
            shadow = ModelState(self._node_params(node),
                                iteration=self.iteration)
            honest[m] = local_gradient(
                self.task, shadow, m, self.payload_bytes,
                batch_size=cfg.training.batch_size, batch_rng=self.rng_batch)

        total = len(honest)
        for m in sorted(self.nodes):
            node = self.nodes[m]
            strat = node.strategy
            if strat is None:
                node.gradient = honest[m]
                continue
            view = None
            if (strat.kind == "omniscient-craft"
                    and cfg.adversary.omniscient_grant):
                others = sum(
                    (honest[j].values for j in sorted(honest) if j != m),
                    np.zeros(cfg.training.dimension))
                view = adv.OmniscientView(
                    others_sum=others, n=total,
                    current_params=self.model.params.copy(),
                    learning_rate=self.lr)
            node.gradient = adv.corrupt_gradient(honest[m], strat,
                                                 self.rng_adversary, view)

        # canonical stream replay, in schedule order
        self._canonical_streams.clear()
        self._canonical.clear()
        self._canonical_digest.clear()
        K = self.k_committees
        finals_by_holder: dict[int, StreamValue] = {}
        iteration_selections: list[list[list[list[Gradient]]]] = [
            [[] for _ in range(K)] for _ in range(K)]
        for s in range(K):
            stream: Optional[StreamValue] = None
            for r in range(K):
                k = (s + r) % K
                for desc in self.committees[k].steps:
                    if desc.kind != "reduce" or desc.visit != r:
                        continue
                    sel = [self.nodes[m].gradient for m in desc.slots]
                    iteration_selections[k][r].append(list(sel))
                    stream = fold(self.spec, sel, stream, s)
                    self._canonical_streams[(k, desc.index)] = stream
            finals_by_holder[(s + K - 1) % K] = stream
        self.selections_log.append(iteration_selections)
        self._canonical_finals = sorted(finals_by_holder.values(),
                                        key=lambda sv: sv.stream_id)

        for committee in self.committees:
            k = committee.index
            for desc in committee.steps:
                if desc.kind == "reduce":
                    sv = self._canonical_streams[(k, desc.index)]
                    if desc.chunk > 0:
                        comp2 = self._canonical_streams[(k, desc.index - 1)].digest()
                    elif desc.visit > 0:
                        src = (k - 1) % K
                        src_idx = self._visit_final_index(src, desc.visit - 1)
                        comp2 = self._canonical_streams[(src, src_idx)].digest()
                    else:
                        comp2 = None
                else:
                    sv = finals_by_holder[(k - desc.hops) % K]
                    comp2 = sv.digest()
                selection = tuple((m, self.nodes[m].gradient.digest())
                                  for m in desc.slots)
                payload = StepPayload(
                    kind=desc.kind, iteration=self.iteration,
                    stream_id=desc.stream_id, visit=desc.visit,
                    chunk=desc.chunk, selection=selection,
                    comp2_digest=comp2, comp3_digest=sv.digest(),
                    comp3_count=sv.count,
                    model_digest=self._canonical_model_digest,
                    hops=desc.hops, comp3_values=sv.values)
                self._canonical[(k, desc.index)] = payload
                self._canonical_digest[(k, desc.index)] = payload.digest()
        self._canonical_sets[self.iteration] = set(
            self._canonical_digest.values())

        # canonical per-step weights for credit and detection bookkeeping
        self._iter_scores = {m: [] for m in self.nodes}
        for committee in self.committees:
            for desc in committee.steps:
                if desc.kind != "reduce" or not desc.slots:
                    continue
                sv = self._canonical_streams[(committee.index, desc.index)]
                if sv.report is None or sv.report.weights is None:
                    continue
                weights = sv.report.weights
                n_inputs = len(weights)
                per_node: dict[int, float] = {}
                for i, m in enumerate(desc.slots):
                    w = float(weights[i])
                    per_node[m] = w
                    self._iter_scores[m].append(min(1.0, w * n_inputs))
                self.step_weight_log.append(
                    (self.iteration, desc.index, per_node))

    def _visit_final_index(self, k: int, visit: int) -> int:
        for desc in self.committees[k].steps:
            if desc.kind == "reduce" and desc.visit == visit and desc.visit_final:
                return desc.index
        raise KeyError((k, visit))

    # -- event dispatch ---------------------------------------------------------

    def _dispatch(self, node: _Node, event: SimEvent) -> None:
        tag = event.tag
        if tag == "gossip-start":
            self._gossip_start(node)
        elif tag == "gossip":
            self._on_gossip(node, event.payload)
        elif tag == "proposal":
            self._on_proposal_message(node, event.payload, event.sender)
        elif tag in ("vote", "new-view"):
            node.replica.on_message(tag, event.payload, event.sender)
            if (tag == "new-view" and node.done
                    and not adv.withholds(node.strategy)):
                # A halted replica drops control traffic, so a straggler whose
                # peers all finished would otherwise time out forever.  Hand
                # the sender our highest certificate so it can catch up.
                self.clock.send(node.id, event.sender, self.control_bytes,
                                "qc", node.replica.high_qc)
        elif tag == "qc":
            node.replica.on_message(tag, event.payload, event.sender)
            self._maybe_propose(node)
        elif tag == "view-timer":
            node.replica.on_message(tag, event.payload, event.sender)
            self._maybe_propose(node)
        elif tag == "handoff":
            self._on_handoff(node, event.payload, event.sender)
        elif tag == "query":
            self._on_query(node, event.payload, event.sender)
        elif tag == "query-timer":
            self._on_query_timer(node, event.payload)
        elif tag == "block-request":
            blk = node.replica.blocks.get(event.payload)
            if blk is not None and not adv.withholds(node.strategy):
                self.clock.send(node.id, event.sender, self.control_bytes,
                                "block-reply", blk)
        elif tag == "block-reply":
            node.replica.ingest_block(event.payload, event.sender)
            self._rescan_pending(node)
            self._maybe_propose(node)
        else:
            raise RuntimeError(f"unknown event tag {tag!r}")

    # -- gossip phase -------------------------------------------------------------

    def _gossip_start(self, node: _Node) -> None:
        node.replica.start()
        grad = node.gradient
        node.gossip[node.id] = grad
        node.tracker.retain(grad.digest())
        peers = [m for m in node.committee.members if m != node.id]
        self.clock.broadcast(node.id, peers, self.payload_bytes, "gossip",
                             (self.iteration, grad))
        self._maybe_propose(node)

    def _on_gossip(self, node: _Node, payload: tuple[int, Gradient]) -> None:
        iteration, grad = payload
        if iteration != self.iteration:
            return
        node.gossip[grad.origin] = grad
        node.tracker.transient_add(self.payload_bytes)
        self._rescan_pending(node)
        self._maybe_propose(node)

    def _gossip_complete(self, node: _Node, slots: tuple[int, ...]) -> bool:
        return all(m in node.gossip for m in slots)

    # -- proposal path --------------------------------------------------------------

    def _payload_ready(self, node: _Node, block: Block) -> bool:
        """Data-availability gate: hold a proposal until the gossip, parent
        fold, or consumed handoff it builds on has arrived."""
        p = block.payload
        if p is None or p.iteration != self.iteration:
            return True
        desc = self._find_desc(node.committee, p)
        if desc is None:
            return True
        if not self._gossip_complete(node, desc.slots):
            return False
        if desc.kind == "gather":
            return desc.consumes_seq in node.handoffs
        if desc.chunk > 0:
            return (p.visit, p.chunk - 1) in node.fold_local
        if desc.visit > 0:
            return desc.consumes_seq in node.handoffs
        return True

    def _find_desc(self, committee: CommitteeInfo, p: StepPayload
                   ) -> Optional[StepDescriptor]:
        for desc in committee.steps:
            if (desc.kind == p.kind and desc.stream_id == p.stream_id
                    and desc.visit == p.visit and desc.chunk == p.chunk):
                return desc
        return None

    def _on_proposal_message(self, node: _Node, block: Block, sender: int) -> None:
        if not self._payload_ready(node, block):
            node.pending.append((block, sender))
            self._arm_pending_query(node, block)
            return
        node.replica.on_message("proposal", block, sender)
        self._rescan_pending(node)
        self._maybe_propose(node)

    def _arm_pending_query(self, node: _Node, block: Block) -> None:
        """A held proposal may be waiting on a handoff a faulty counterpart
        never sent; start querying for it rather than relying on the
        node's own commit progress to notice."""
        p = block.payload
        if p is None or p.iteration != self.iteration:
            return
        desc = self._find_desc(node.committee, p)
        if (desc is not None and desc.consumes_seq is not None
                and desc.consumes_seq not in node.handoffs):
            self._arm_seq(node, desc.consumes_seq)

    def _rescan_pending(self, node: _Node) -> None:
        if not node.pending:
            return
        progressed = True
        while progressed:
            progressed = False
            remaining: list[tuple[Block, int]] = []
            for block, sender in node.pending:
                if self._payload_ready(node, block):
                    node.replica.on_message("proposal", block, sender)
                    progressed = True
                else:
                    remaining.append((block, sender))
            node.pending = remaining
        for block, _sender in node.pending:
            self._arm_pending_query(node, block)

    def _validate_payload(self, node: _Node, block: Block) -> Optional[str]:
        error = self._validate_payload_inner(node, block)
        if error is not None:
            self._rejected_reports.setdefault(block.digest, set()).add(node.id)
        return error

    def _validate_payload_inner(self, node: _Node, block: Block) -> Optional[str]:
        p = block.payload
        if p.iteration != self.iteration:
            return "iteration-mismatch"
        if p.model_digest != self._node_model_digest(node):
            return "model-mismatch"
        desc = self._find_desc(node.committee, p)
        if desc is None:
            return "unscheduled-step"
        expected_sel = tuple((m, node.gossip[m].digest()) for m in desc.slots)
        if p.selection != expected_sel:
            return "selection-mismatch"
        if p.hops != desc.hops:
            return "hops-mismatch"

        if desc.kind == "gather":
            rec = node.handoffs.get(desc.consumes_seq)
            if rec is None:
                return "missing-handoff"
            d = rec.stream.digest()
            if p.comp2_digest != d or p.comp3_digest != d:
                return "comp3-mismatch"
            if p.comp3_count != rec.stream.count:
                return "count-mismatch"
            return None

        incoming: Optional[StreamValue] = None
        if desc.chunk > 0:
            incoming = node.fold_local.get((p.visit, p.chunk - 1))
            if incoming is None:
                return "missing-parent-fold"
            if p.comp2_digest != incoming.digest():
                return "comp2-mismatch"
        elif desc.visit > 0:
            rec = node.handoffs.get(desc.consumes_seq)
            if rec is None:
                return "missing-handoff"
            incoming = rec.stream
            if p.comp2_digest != rec.stream.digest():
                return "comp2-mismatch"
        elif p.comp2_digest is not None:
            return "comp2-mismatch"

        sel = [node.gossip[m] for m in desc.slots]
        if not sel and incoming is None:
            return "empty-step"
        sv = fold(self.spec, sel, incoming, p.stream_id)
        if sv.digest() != p.comp3_digest or sv.count != p.comp3_count:
            return "comp3-mismatch"
        if p.comp3_values is None or not np.allclose(
                sv.values, p.comp3_values, rtol=0.0, atol=1e-9):
            return "comp3-mismatch"
        if (p.visit, p.chunk) not in node.fold_local:
            node.fold_local[(p.visit, p.chunk)] = sv
            node.tracker.retain(sv.digest())
        return None

    # -- proposing ----------------------------------------------------------------

    def _step_data_ready(self, node: _Node, desc: StepDescriptor) -> bool:
        if not self._gossip_complete(node, desc.slots):
            return False
        if desc.kind == "gather" or (desc.chunk == 0 and desc.visit > 0):
            return desc.consumes_seq in node.handoffs
        if desc.chunk > 0:
            return (desc.visit, desc.chunk - 1) in node.fold_local
        return True

    def _maybe_propose(self, node: _Node) -> None:
        rep = node.replica
        if rep is None or not rep.active or not rep.is_leader():
            return
        if node.last_proposed_view >= rep.view or not rep.ready_to_lead():
            return
        if adv.withholds(node.strategy):
            return
        committee = node.committee
        chain = rep.chain_payload_digests()
        payload: Optional[StepPayload] = None
        for desc in committee.steps:
            digest = self._canonical_digest[(committee.index, desc.index)]
            if digest in node.committed_steps or digest in chain:
                continue
            if node.model_offset is not None:
                own = dataclasses.replace(
                    self._canonical[(committee.index, desc.index)],
                    model_digest=self._node_model_digest(node))
                if own.digest() in chain:
                    continue
            if self._step_data_ready(node, desc):
                payload = self._build_proposal_payload(node, desc)
            break
        if payload is None:
            if not rep.has_uncommitted_payload():
                return
            node.last_proposed_view = rep.view
            rep.propose(None)
            return
        node.last_proposed_view = rep.view
        if adv.equivocates(node.strategy):
            members = committee.members
            real_block = rep.build_block(payload)
            idle_block = rep.build_block(None)
            rep.broadcast_proposal(real_block,
                                   targets=tuple(members[0::2]) + (node.id,))
            rep.broadcast_proposal(idle_block, targets=tuple(members[1::2]))
            return
        rep.propose(payload)

    def _build_proposal_payload(self, node: _Node,
                                desc: StepDescriptor) -> StepPayload:
        payload = self._canonical[(node.committee.index, desc.index)]
        if node.model_offset is not None:
            payload = dataclasses.replace(
                payload, model_digest=self._node_model_digest(node))
        if desc.consumes_seq is not None:
            rec = node.handoffs[desc.consumes_seq]
            payload = dataclasses.replace(payload, comp2_qc=rec.qc)
        if adv.falsifies(node.strategy) and desc.kind == "reduce" and desc.slots:
            fake = adv.falsify_aggregation(payload.comp3_values,
                                           node.strategy, self.rng_adversary)
            sv = StreamValue(desc.stream_id, fake, payload.comp3_count,
                             self.payload_bytes)
            payload = dataclasses.replace(payload, comp3_digest=sv.digest(),
                                          comp3_values=sv.values)
        return payload

    # -- certificates and commits ---------------------------------------------------

    def _on_qc(self, node: _Node, qc: QuorumCertificate) -> None:
        key = (node.committee.index, qc.view)
        seen = self._qc_seen.setdefault(key, set())
        seen.add(qc.block_digest)
        if len(seen) == 2:
            self.qc_conflicts += 1
        self._maybe_propose(node)

    def _on_misbehavior(self, node: _Node, report: MisbehaviorReport) -> None:
        self.misbehavior.append(report)
        if report.kind == "equivocation":
            key = f"eq:{node.committee.index}:{report.view}:{report.subject}"
            self._rejected_reports.setdefault(key, set()).add(report.reporter)

    def _on_commit(self, node: _Node, block: Block) -> None:
        committee = node.committee
        self._committee_commit_views.setdefault(
            committee.index, set()).add(block.view)
        if block.payload is None:
            return
        p = block.payload
        if node.strategy is None:
            canon = self._canonical_sets.get(p.iteration)
            if canon is not None and p.digest() not in canon:
                self.falsified_commits += 1
        if p.iteration != self.iteration:
            return
        digest = p.digest()
        firsts = self._committee_first_commit.setdefault(committee.index, set())
        if digest not in firsts:
            firsts.add(digest)
            self._iter_committed += 1
            self.committed_payload_total += 1
        if digest in node.committed_steps:
            return
        node.committed_steps.add(digest)
        node.committed_payload_count += 1

        desc = self._find_desc(committee, p)
        K = self.k_committees
        if desc is not None and desc.kind == "reduce":
            if p.comp2_digest is not None:
                node.tracker.release(p.comp2_digest)
            if desc.visit_final:
                sv = node.fold_local.get((desc.visit, desc.chunk))
                if sv is None:
                    # Commit learned through chain sync without local
                    # validation; fall back to the canonical stream value.
                    sv = self._canonical_streams[(committee.index, desc.index)]
                    node.fold_local[(desc.visit, desc.chunk)] = sv
                    node.tracker.retain(sv.digest())
                if desc.visit < K - 1:
                    qc = node.replica.qc_of[block.digest]
                    self._send_handoff(node, HandoffRecord(
                        self.iteration, desc.visit, sv, qc, block, hops=0))
                else:
                    node.finals[sv.stream_id] = sv
                    node.tracker.retain(sv.digest())
                    if K > 1:
                        qc = node.replica.qc_of[block.digest]
                        self._send_handoff(node, HandoffRecord(
                            self.iteration, K - 1, sv, qc, block, hops=1))
                node.tracker.release(sv.digest())   # fold role ends here
        elif desc is not None:
            rec = node.handoffs.get(desc.consumes_seq)
            if rec is not None:
                node.finals[rec.stream.stream_id] = rec.stream
                node.tracker.retain(rec.stream.digest())
                if desc.hops + 1 <= K - 1:
                    self._send_handoff(node, HandoffRecord(
                        self.iteration, desc.consumes_seq + 1, rec.stream,
                        rec.qc, rec.block, hops=desc.hops + 1))
                node.tracker.release(rec.stream.digest())  # handoff role ends

        self._arm_expectation(node)
        if node.committed_payload_count == len(committee.steps):
            node.done = True
            node.replica.halt()
            self._done_count += 1
            if self._done_count == len(self.nodes):
                self._finalize_iteration()

    # -- handoffs ---------------------------------------------------------------------

    def _send_handoff(self, node: _Node, rec: HandoffRecord) -> None:
        if rec.seq in node.handoff_sent:
            return
        node.handoff_sent.add(rec.seq)
        self._log_sent(node, rec)
        K = self.k_committees
        if K == 1 or adv.withholds(node.strategy):
            return
        committee = node.committee
        neighbor = self.committees[(committee.index + 1) % K]
        size = self.payload_bytes + self.control_bytes
        self.handoff_log.append(
            (self.iteration, committee.index, rec.seq, node.id))
        if self.cfg.consensus.handoff_fanout == "member-parallel":
            dest = neighbor.members[node.index]
            self.clock.send(node.id, dest, size, "handoff", rec)
        else:
            leader_idx = rec.block.view % len(committee.members)
            if node.index == leader_idx:
                for dest in neighbor.members:
                    self.clock.send(node.id, dest, size, "handoff", rec)

    def _log_sent(self, node: _Node, rec: HandoffRecord) -> None:
        node.sent_log[rec.seq] = rec
        node.tracker.retain(rec.stream.digest())
        while len(node.sent_log) > 2:
            _, old = node.sent_log.popitem(last=False)
            node.tracker.release(old.stream.digest())

    def _expected_stream_for_seq(self, k: int, seq: int) -> int:
        K = self.k_committees
        if seq <= K - 2:              # reduce handoff, fed to visit seq+1
            return (k - seq - 1) % K
        g = seq - (K - 2)             # gather hop index
        return (k - g + 1) % K

    def _verify_handoff(self, node: _Node, rec: HandoffRecord) -> bool:
        K = self.k_committees
        k = node.committee.index
        if rec.seq < 0 or rec.seq > 2 * K - 3:
            return False
        if rec.stream.stream_id != self._expected_stream_for_seq(k, rec.seq):
            return False
        if rec.qc is None or rec.block is None or rec.block.payload is None:
            return False
        if rec.qc.block_digest != rec.block.digest:
            return False
        if rec.block.payload.comp3_digest != rec.stream.digest():
            return False
        if rec.seq <= K - 2:
            origin = (k - 1) % K
        else:
            origin = (rec.stream.stream_id + K - 1) % K
        return node.replica.verify_qc(rec.qc, self.committees[origin].members)

    def _on_handoff(self, node: _Node, rec: HandoffRecord, sender: int) -> None:
        if rec.iteration != self.iteration or rec.seq in node.handoffs:
            return
        if not self._verify_handoff(node, rec):
            self._on_misbehavior(node, MisbehaviorReport(
                reporter=node.id, subject=sender, view=-1,
                kind="invalid-handoff"))
            return
        node.handoffs[rec.seq] = rec
        node.tracker.retain(rec.stream.digest())
        if node.query_armed == rec.seq:
            node.query_armed = None
        self._rescan_pending(node)
        self._arm_expectation(node)
        self._maybe_propose(node)

    def _arm_expectation(self, node: _Node) -> None:
        """Watch for the next handoff the node's schedule depends on."""
        steps = node.committee.steps
        idx = node.committed_payload_count
        if idx >= len(steps):
            return
        seq = steps[idx].consumes_seq
        if seq is not None:
            self._arm_seq(node, seq)

    def _arm_seq(self, node: _Node, seq: int) -> None:
        if (self.k_committees == 1 or node.done
                or node.query_armed is not None or seq in node.handoffs):
            return
        node.query_armed = seq
        self.clock.schedule_timer(node.committee.view_timeout, node.id,
                                  "query-timer", (self.iteration, seq))

    def _on_query_timer(self, node: _Node, payload: tuple[int, int]) -> None:
        iteration, seq = payload
        if iteration != self.iteration or node.done or seq in node.handoffs:
            if node.query_armed == seq:
                node.query_armed = None
                self._arm_expectation(node)
            return
        source = self.committees[(node.committee.index - 1) % self.k_committees]
        peer = source.members[int(self.rng_query.integers(len(source.members)))]
        self.fallback_queries += 1
        self.clock.send(node.id, peer, self.control_bytes, "query",
                        (self.iteration, seq))
        self.clock.schedule_timer(node.committee.view_timeout, node.id,
                                  "query-timer", (self.iteration, seq))

    def _on_query(self, node: _Node, payload: tuple[int, int], sender: int) -> None:
        iteration, seq = payload
        if iteration != self.iteration or adv.withholds(node.strategy):
            return
        rec = node.sent_log.get(seq)
        if rec is None:
            return
        size = self.payload_bytes + self.control_bytes
        self.clock.send(node.id, sender, size, "handoff", rec)

    # -- iteration boundary ------------------------------------------------------------

    def _start_iteration(self) -> None:
        self.iteration += 1
        self._iteration_started_at = self.clock.now
        self._done_count = 0
        self._iter_committed = 0
        self._iter_evictions = 0
        self._committee_first_commit = {}
        self._committee_commit_views = {}
        for m in sorted(self.nodes):
            self.nodes[m].reset_iteration_state()
        self._committee_start_view = {
            c.index: min(self.nodes[m].replica.view for m in c.members)
            for c in self.committees}
        self._prepare_iteration()
        for m in sorted(self.nodes):
            self.clock.schedule_timer(self.cfg.training.compute_time_s, m,
                                      "gossip-start")

    def _finalize_iteration(self) -> None:
        update = combine_finals(self._canonical_finals)
        apply_update(self.model, update, self.lr)
        self.update_log.append(update)
        self.iteration_times.append(self.clock.now - self._iteration_started_at)

        for committee in self.committees:
            views = self._committee_commit_views.get(committee.index, set())
            self.liveness_log.append({
                "iteration": self.iteration,
                "committee": committee.index,
                "start_view": self._committee_start_view[committee.index],
                "end_view": max(self.nodes[m].replica.view
                                for m in committee.members),
                "committed_views": sorted(views),
            })

        for m, scores in self._iter_scores.items():
            if scores:
                self._epoch_scores.setdefault(m, []).extend(scores)
        if (self.spec.kind == "detection-weighted"
                and self.iteration % self.cfg.sharding.reconfigure_every == 0):
            epoch = self.iteration // self.cfg.sharding.reconfigure_every
            means = {m: float(np.mean(v))
                     for m, v in sorted(self._epoch_scores.items()) if v}
            self.ledger.update_credit(means, epoch)
            newly = self.ledger.evict_low_credit(self.credit_policy) - self.evicted
            self.evicted.update(newly)
            self._iter_evictions = len(newly)
            self.evictions_total += len(newly)
            self._epoch_scores = {}

        peak = max(node.tracker.peak_bytes for node in self.nodes.values())
        self.rows.append(MetricsRow(
            iteration=self.iteration,
            simulated_time_s=self.clock.now,
            per_node_storage_bytes=peak,
            global_loss=self.task.loss(self.model.params),
            committed_blocks=self._iter_committed,
            rejected_blocks=self._count_rejected(),
            evictions=self._iter_evictions))

        for node in self.nodes.values():
            node.tracker.transient_remove(
                self.payload_bytes * max(0, len(node.gossip) - 1))
            node.tracker.release_all()

        if self.iteration < self.cfg.iterations:
            self._start_iteration()

    def _count_rejected(self) -> int:
        """Blocks newly reported invalid by more members than the byzantine
        bound, so at least one honest reporter is among them."""
        bound = (self.cfg.committee_size - 1) // 3
        count = 0
        for key, reporters in self._rejected_reports.items():
            if key in self._rejected_counted:
                continue
            if len(reporters) > bound:
                self._rejected_counted.add(key)
                count += 1
        return count

    # -- run ----------------------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        self._start_iteration()
        if cfg.horizon_s is not None:
            horizon = cfg.horizon_s
        else:
            per_iter = (cfg.training.compute_time_s
                        + 40.0 * max(c.view_timeout for c in self.committees))
            horizon = cfg.iterations * per_iter
        _, truncated = self.clock.run_until_idle(horizon)

        committed_sequences = {
            m: [b.digest for b in node.replica.committed]
            for m, node in sorted(self.nodes.items())}
        return RunResult(
            config=cfg,
            rows=self.rows,
            final_params=self.model.params.copy(),
            final_loss=self.task.loss(self.model.params),
            trace_digest=self.clock.trace_digest(),
            truncated=truncated,
            iteration_times=self.iteration_times,
            update_log=self.update_log,
            selections_log=self.selections_log,
            peak_retained_bytes=max(node.tracker.peak_bytes
                                    for node in self.nodes.values()),
            transient_peak_bytes=max(node.tracker.transient_peak
                                     for node in self.nodes.values()),
            handoff_log=self.handoff_log,
            committee_members=[c.members for c in self.committees],
            byzantine_nodes=self.byzantine,
            committed_sequences=committed_sequences,
            liveness_log=self.liveness_log,
            step_weight_log=self.step_weight_log,
            misbehavior=self.misbehavior,
            qc_conflicts=self.qc_conflicts,
            falsified_commits=self.falsified_commits,
            fallback_queries=self.fallback_queries,
            timeouts_fired=sum(n.replica.timeouts_fired
                               for n in self.nodes.values()),
            evictions_total=self.evictions_total,
            skipped_updates=self.model.skipped_updates,
            committed_payload_blocks=self.committed_payload_total,
            credit_records=dict(self.ledger.records))


def run_pirate(cfg: RunConfig) -> RunResult:
    return PirateEngine(cfg).run()
