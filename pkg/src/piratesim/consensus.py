"""Chained BFT consensus for committees (HotStuff-style, rotating leaders).

Each committee runs its own instance. A block carries one aggregation step
as payload (or no payload for idle view filler). Votes for the block of
view v are sent to the leader of view v+1, who forms a quorum certificate
and extends the chain. A block is committed once it tails a chain of three
blocks with consecutive views, each certified by the next.

Safety: replicas vote at most once per view, and only for a proposal that
extends their locked block or whose justify is newer than the lock. With at
most floor((c-1)/3) byzantine members and quorum floor(2c/3)+1, two
conflicting quorum certificates in one view would need more overlapping
signers than the byzantine bound allows.

The replica is transport-agnostic: the surrounding runtime supplies send,
timer, and clock callables plus the payload validation hook, so the same
state machine runs under the event-driven network or a bare test harness.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

GENESIS_DIGEST = "genesis"
CONTROL_MESSAGE_BYTES = 2048


def quorum(committee_size: int) -> int:
    """Votes needed for a certificate: floor(2c/3) + 1."""
    return (2 * committee_size) // 3 + 1


def view_timeout_s(committee_size: int, payload_bytes: int,
                   slowest_uplink_mbps: float, latency_s: float,
                   factor: float = 4.0) -> float:
    """Pacemaker budget for one view.

    Sized so a leader can serially push a payload to every peer over the
    slowest admitted uplink, plus two propagation delays, with headroom.
    """
    transfer = (committee_size - 1) * payload_bytes * 8.0 / (slowest_uplink_mbps * 1e6)
    return factor * (transfer + 2.0 * latency_s)


@dataclass(frozen=True)
class QuorumCertificate:
    view: int
    block_digest: str
    signers: tuple[int, ...]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.view}|{self.block_digest}|{self.signers}".encode())
        return h.hexdigest()[:16]


GENESIS_QC = QuorumCertificate(view=0, block_digest=GENESIS_DIGEST, signers=())


@dataclass(frozen=True)
class StepPayload:
    """One aggregation step riding a block.

    kind is "reduce" (fold scheduled local gradients, plus the held stream
    or the parent block's running fold), "gather" (commit a finalized
    stream verbatim), or "idle" is represented by a block without payload.

    selection lists (node_id, gradient_digest) pairs; values travel in the
    gossip phase, so the proposal itself references them by digest. The
    fold output comp3 likewise travels by digest and is recomputed by every
    validator; the array rides along in memory for the simulation only.
    """

    kind: str
    iteration: int
    stream_id: int
    visit: int
    chunk: int
    selection: tuple[tuple[int, str], ...]
    comp2_digest: Optional[str]
    comp3_digest: str
    comp3_count: int
    model_digest: str
    hops: int = 0
    comp2_qc: Optional[QuorumCertificate] = field(default=None, compare=False)
    comp3_values: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def digest(self) -> str:
        h = hashlib.sha256()
        key = (self.kind, self.iteration, self.stream_id, self.visit,
               self.chunk, self.selection, self.comp2_digest,
               self.comp3_digest, self.comp3_count, self.model_digest,
               self.hops)
        h.update(repr(key).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Block:
    view: int
    parent_digest: str
    justify: QuorumCertificate
    proposer: int
    payload: Optional[StepPayload]
    digest: str


def make_block(view: int, parent_digest: str, justify: QuorumCertificate,
               proposer: int, payload: Optional[StepPayload]) -> Block:
    pd = payload.digest() if payload is not None else "idle"
    h = hashlib.sha256()
    h.update(f"{view}|{parent_digest}|{justify.digest()}|{proposer}|{pd}".encode())
    return Block(view=view, parent_digest=parent_digest, justify=justify,
                 proposer=proposer, payload=payload, digest=h.hexdigest()[:16])


@dataclass(frozen=True)
class Vote:
    view: int
    block_digest: str
    voter: int


@dataclass(frozen=True)
class NewView:
    """View-change message carrying the sender's freshest chain evidence.

    Besides the highest certificate, it attests the sender's most recent
    vote. A quorum of matching attestations lets the next leader rebuild a
    certificate whose votes were all sent to a silent collector, which is
    the only way the tail of a committed three-chain can otherwise vanish.
    """
    view: int
    high_qc: QuorumCertificate
    voted_view: int = 0
    voted_digest: str = GENESIS_DIGEST


@dataclass(frozen=True)
class MisbehaviorReport:
    reporter: int
    subject: int
    view: int
    kind: str
    detail: str = ""


def commit_candidates(certified: Block, blocks: dict[str, Block],
                      committed: frozenset[str] | set[str] = frozenset()
                      ) -> list[Block]:
    """Apply the three-chain rule when `certified` gains a certificate.

    Walks certified -> parent -> grandparent; if the three views are
    consecutive the grandparent (and transitively its ancestors) is safe to
    commit. Returns the chain ending at that grandparent, oldest first,
    excluding anything already in `committed`. Pure helper shared by the
    replica and the tests.
    """
    b1 = certified
    b2 = blocks.get(b1.parent_digest)
    if b2 is None:
        return []
    b3 = blocks.get(b2.parent_digest)
    if b3 is None:
        return []
    if b1.view != b2.view + 1 or b2.view != b3.view + 1:
        return []
    chain = []
    cursor: Optional[Block] = b3
    while cursor is not None and cursor.digest not in committed:
        chain.append(cursor)
        cursor = blocks.get(cursor.parent_digest)
    chain.reverse()
    return chain


class StorageBreach(RuntimeError):
    """Raised when a node's retained payload bytes exceed the hard cap."""


class StorageTracker:
    """Accounts a node's retained payload-sized values.

    Retention is keyed by value digest so a value referenced from several
    places (a fold output that is also the held stream, a gather input that
    becomes a stored final) is counted once. The cap asserts the protocol
    claim that a node never retains more than cap_payloads payload sizes at
    once; gossip working copies consumed by fold recomputation are tracked
    separately as a transient diagnostic, not counted against the cap.
    """

    def __init__(self, node_id: int, payload_bytes: int, cap_payloads: int = 12):
        self.node_id = node_id
        self.payload_bytes = payload_bytes
        self.cap_bytes = cap_payloads * payload_bytes
        self._held: dict[str, tuple[int, int]] = {}   # key -> (size, refcount)
        self.current_bytes = 0
        self.peak_bytes = 0
        self.transient_bytes = 0
        self.transient_peak = 0

    def retain(self, key: str, nbytes: Optional[int] = None) -> None:
        """Reference one payload value; bytes count once per distinct key."""
        if key in self._held:
            size, refs = self._held[key]
            self._held[key] = (size, refs + 1)
            return
        size = self.payload_bytes if nbytes is None else nbytes
        self._held[key] = (size, 1)
        self.current_bytes += size
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        if self.current_bytes > self.cap_bytes:
            raise StorageBreach(
                f"node {self.node_id} retains {self.current_bytes} bytes, "
                f"cap {self.cap_bytes}")

    def release(self, key: str) -> None:
        entry = self._held.get(key)
        if entry is None:
            return
        size, refs = entry
        if refs > 1:
            self._held[key] = (size, refs - 1)
            return
        del self._held[key]
        self.current_bytes -= size

    def release_all(self) -> None:
        self._held.clear()
        self.current_bytes = 0

    def transient_add(self, nbytes: int) -> None:
        self.transient_bytes += nbytes
        if self.transient_bytes > self.transient_peak:
            self.transient_peak = self.transient_bytes

    def transient_remove(self, nbytes: int) -> None:
        self.transient_bytes -= nbytes

    def held_keys(self) -> tuple[str, ...]:
        return tuple(self._held)


class CommitteeReplica:
    """One member's view of its committee's chained consensus."""

    def __init__(self, node_id: int, members: tuple[int, ...], *,
                 now: Callable[[], float],
                 send: Callable[[int, int, str, object], None],
                 set_timer: Callable[[float, str, object], object],
                 cancel_timer: Optional[Callable[[object], None]] = None,
                 view_timeout: float,
                 validate_payload: Optional[Callable[[Block], Optional[str]]] = None,
                 on_commit: Optional[Callable[[Block], None]] = None,
                 on_qc: Optional[Callable[[QuorumCertificate], None]] = None,
                 on_ready: Optional[Callable[[int], None]] = None,
                 on_misbehavior: Optional[Callable[[MisbehaviorReport], None]] = None,
                 request_block: Optional[Callable[[str, int], None]] = None,
                 control_bytes: int = CONTROL_MESSAGE_BYTES,
                 gst_s: float = 0.0,
                 pre_gst_timeout_scale: float = 1.0,
                 vote_all: bool = False):
        if node_id not in members:
            raise ValueError("replica node must belong to its committee")
        self.node_id = node_id
        self.members = tuple(members)
        self.quorum = quorum(len(members))
        self.now = now
        self._send = send
        self._set_timer = set_timer
        self._cancel_timer = cancel_timer
        self._timer_handle: Optional[object] = None
        self.view_timeout = view_timeout
        self.validate_payload = validate_payload
        self.on_commit = on_commit
        self.on_qc = on_qc
        self.on_ready = on_ready
        self.on_misbehavior = on_misbehavior
        self.request_block = request_block
        self.control_bytes = control_bytes
        self.gst_s = gst_s
        self.pre_gst_timeout_scale = pre_gst_timeout_scale
        self.vote_all = vote_all

        genesis = Block(view=0, parent_digest="", justify=GENESIS_QC,
                        proposer=-1, payload=None, digest=GENESIS_DIGEST)
        self.blocks: dict[str, Block] = {GENESIS_DIGEST: genesis}
        self.qc_of: dict[str, QuorumCertificate] = {GENESIS_DIGEST: GENESIS_QC}
        self.view = 1
        self.voted_view = 0
        self.voted_digest = GENESIS_DIGEST
        self.locked_qc = GENESIS_QC
        self.high_qc = GENESIS_QC
        self.committed: list[Block] = []
        self._committed_digests: set[str] = {GENESIS_DIGEST}
        self._votes: dict[tuple[int, str], set[int]] = {}
        self._qc_formed: dict[tuple[int, str], QuorumCertificate] = {}
        self._new_views: dict[int, dict[int, QuorumCertificate]] = {}
        self._ready_views: set[int] = set()
        self._proposals_by_view: dict[int, dict[int, str]] = {}
        self._orphans: dict[str, list[tuple[Block, int]]] = {}
        self._requested: set[str] = set()
        self.active = True
        self.timeouts_fired = 0
        self.votes_cast = 0

    # -- role helpers ------------------------------------------------------

    def leader_of(self, view: int) -> int:
        return self.members[view % len(self.members)]

    def is_leader(self, view: Optional[int] = None) -> bool:
        return self.leader_of(self.view if view is None else view) == self.node_id

    def ready_to_lead(self) -> bool:
        """Whether proposing now would extend the chain at consecutive views.

        The happy-path leader waits for the certificate of the previous
        view before building on it; proposing earlier would fork a sibling
        under an older certificate and stall commits. After a timeout the
        new-view quorum authorizes the leader to propose with whatever
        certificate is highest.
        """
        return (self.high_qc.view + 1 == self.view
                or self.view in self._ready_views)

    def timeout_for(self, view: int) -> float:
        scale = self.pre_gst_timeout_scale if self.now() < self.gst_s else 1.0
        return self.view_timeout * scale

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self.active = True
        self._arm_timer()

    def halt(self) -> None:
        """Stop participating; pending timers become no-ops."""
        self.active = False
        self._drop_timer()

    def _drop_timer(self) -> None:
        if self._timer_handle is not None and self._cancel_timer is not None:
            self._cancel_timer(self._timer_handle)
            self._timer_handle = None

    def _arm_timer(self) -> None:
        self._drop_timer()
        if self.active:
            self._timer_handle = self._set_timer(
                self.timeout_for(self.view), "view-timer", self.view)

    def _enter_view(self, view: int) -> None:
        if view > self.view:
            self.view = view
        self._arm_timer()

    # -- outbound ----------------------------------------------------------

    def build_block(self, payload: Optional[StepPayload],
                    view: Optional[int] = None) -> Block:
        v = self.view if view is None else view
        return make_block(view=v, parent_digest=self.high_qc.block_digest,
                          justify=self.high_qc, proposer=self.node_id,
                          payload=payload)

    def broadcast_proposal(self, block: Block,
                           targets: Optional[tuple[int, ...]] = None) -> None:
        """Send a proposal to committee peers and process it locally."""
        peers = [m for m in (targets or self.members) if m != self.node_id]
        for peer in peers:
            self._send(peer, self.control_bytes, "proposal", block)
        if targets is None or self.node_id in targets:
            self.on_proposal(block, self.node_id)

    def propose(self, payload: Optional[StepPayload]) -> Block:
        block = self.build_block(payload)
        self.broadcast_proposal(block)
        return block

    def _cast_vote(self, block: Block) -> None:
        vote = Vote(view=block.view, block_digest=block.digest, voter=self.node_id)
        self.votes_cast += 1
        target = self.leader_of(block.view + 1)
        if target == self.node_id:
            self.on_vote(vote, self.node_id)
        else:
            self._send(target, self.control_bytes, "vote", vote)

    def _report(self, subject: int, view: int, kind: str, detail: str = "") -> None:
        if self.on_misbehavior is not None:
            self.on_misbehavior(MisbehaviorReport(
                reporter=self.node_id, subject=subject, view=view,
                kind=kind, detail=detail))

    # -- inbound -----------------------------------------------------------

    def on_message(self, tag: str, payload: object, sender: int) -> None:
        if not self.active:
            return
        if tag == "proposal":
            self.on_proposal(payload, sender)
        elif tag == "vote":
            self.on_vote(payload, sender)
        elif tag == "new-view":
            self.on_new_view(payload, sender)
        elif tag == "qc":
            if self.verify_qc(payload):
                if (payload.block_digest not in self.blocks
                        and payload.block_digest not in self._requested
                        and self.request_block is not None):
                    self._requested.add(payload.block_digest)
                    self.request_block(payload.block_digest, sender)
                self._adopt_qc(payload)
            else:
                self._report(sender, payload.view, "bad-qc")
        elif tag == "view-timer":
            self.on_view_timer(payload)

    def verify_qc(self, qc: QuorumCertificate,
                  members: Optional[tuple[int, ...]] = None) -> bool:
        group = self.members if members is None else members
        if qc.view == 0 and qc.block_digest == GENESIS_DIGEST:
            return True
        signers = set(qc.signers)
        if len(signers) != len(qc.signers):
            return False
        if not signers.issubset(set(group)):
            return False
        return len(signers) >= quorum(len(group))

    def _extends(self, block: Block, ancestor_digest: str) -> bool:
        cursor: Optional[Block] = block
        while cursor is not None:
            if cursor.digest == ancestor_digest:
                return True
            cursor = self.blocks.get(cursor.parent_digest)
        return False

    def _safe_to_vote(self, block: Block) -> bool:
        if block.justify.view > self.locked_qc.view:
            return True
        return self._extends(block, self.locked_qc.block_digest)

    def on_proposal(self, block: Block, sender: int) -> None:
        """Process a proposal; the sender may relay on a sync path.

        Proposer authenticity is by construction: the simulation never
        fabricates a block with someone else's proposer id, standing in for
        an unforgeable signature.
        """
        if not self.active:
            return
        if block.digest in self.blocks:
            return
        if block.proposer != self.leader_of(block.view):
            self._report(block.proposer, block.view, "not-leader")
            return
        if not self.verify_qc(block.justify):
            self._report(block.proposer, block.view, "bad-justify")
            return
        if block.parent_digest != block.justify.block_digest:
            self._report(block.proposer, block.view, "parent-mismatch")
            return
        if block.justify.block_digest not in self.blocks:
            # Hold the block until the missing ancestor is synced over.
            self._orphans.setdefault(block.parent_digest, []).append(
                (block, sender))
            if (block.parent_digest not in self._requested
                    and self.request_block is not None):
                self._requested.add(block.parent_digest)
                self.request_block(block.parent_digest, sender)
            return

        seen = self._proposals_by_view.setdefault(block.view, {})
        equivocated = (block.proposer in seen
                       and seen[block.proposer] != block.digest)
        if equivocated:
            self._report(block.proposer, block.view, "equivocation")
        else:
            seen.setdefault(block.proposer, block.digest)

        if block.view < self.view and not self.vote_all:
            # A proposal can clear its data-availability hold after the
            # view has moved on. Voting for it late is still safe (vote
            # monotonicity holds) and may complete the one certificate
            # that lets the chain advance past the block.
            self.blocks[block.digest] = block
            self._update_chain_state(block)
            self._resolve_orphans(block.digest)
            if (not equivocated and block.view > self.voted_view
                    and self._safe_to_vote(block)):
                error = None
                if block.payload is not None and self.validate_payload is not None:
                    error = self.validate_payload(block)
                if error is None:
                    self.voted_view = block.view
                    self.voted_digest = block.digest
                    self._cast_vote(block)
            return

        self.blocks[block.digest] = block
        self._update_chain_state(block)
        self._resolve_orphans(block.digest)

        vote_ok = self.vote_all
        if not vote_ok:
            if equivocated:
                vote_ok = False
            elif block.view <= self.voted_view:
                vote_ok = False
            elif not self._safe_to_vote(block):
                vote_ok = False
            else:
                error = None
                if block.payload is not None and self.validate_payload is not None:
                    error = self.validate_payload(block)
                if error is not None:
                    self._report(block.proposer, block.view, "invalid-payload",
                                 error)
                    vote_ok = False
                else:
                    vote_ok = True
        if vote_ok:
            if not self.vote_all:
                self.voted_view = block.view
                self.voted_digest = block.digest
            self._cast_vote(block)
        self._enter_view(block.view + 1)

    def _resolve_orphans(self, parent_digest: str) -> None:
        waiting = self._orphans.pop(parent_digest, [])
        self._requested.discard(parent_digest)
        for orphan, sender in waiting:
            self.on_proposal(orphan, sender)

    def ingest_block(self, block: Block, sender: int) -> None:
        """Accept a block arriving on the sync path (query reply)."""
        self.on_proposal(block, sender)

    def on_vote(self, vote: Vote, sender: int) -> None:
        if not self.active:
            return
        if sender != vote.voter or vote.voter not in self.members:
            self._report(sender, vote.view, "forged-vote")
            return
        key = (vote.view, vote.block_digest)
        if key in self._qc_formed:
            return
        bucket = self._votes.setdefault(key, set())
        bucket.add(vote.voter)
        if len(bucket) >= self.quorum:
            qc = QuorumCertificate(view=vote.view,
                                   block_digest=vote.block_digest,
                                   signers=tuple(sorted(bucket)))
            self._qc_formed[key] = qc
            # Relay the fresh certificate so every member can advance its
            # chain (and learn commits) without waiting for the next
            # proposal to carry it as a justify.
            for peer in self.members:
                if peer != self.node_id:
                    self._send(peer, self.control_bytes, "qc", qc)
            self._adopt_qc(qc)
            if self.on_qc is not None:
                self.on_qc(qc)

    def on_new_view(self, msg: NewView, sender: int) -> None:
        if not self.active:
            return
        if not self.verify_qc(msg.high_qc):
            self._report(sender, msg.view, "bad-new-view-qc")
            return
        self._adopt_qc(msg.high_qc)
        bucket = self._new_views.setdefault(msg.view, {})
        bucket[sender] = msg
        if (len(bucket) >= self.quorum
                and self.leader_of(msg.view) == self.node_id
                and self.view <= msg.view):
            self._recover_lost_qc(bucket)
            self._enter_view(msg.view)
            self._ready_views.add(msg.view)
            if self.on_ready is not None:
                self.on_ready(msg.view)

    def _recover_lost_qc(self, bucket: dict[int, NewView]) -> None:
        """Rebuild a certificate whose votes went to a silent collector.

        Votes for view v all target the leader of v+1; if that leader
        stays quiet, no one else learns the certificate even though a
        quorum voted. The vote attestations inside the view-change
        messages recover it: quorum-many senders claiming the same last
        vote are exactly the missing signer set.
        """
        claims: dict[tuple[int, str], set[int]] = {}
        for voter, nv in bucket.items():
            if nv.voted_view > self.high_qc.view:
                claims.setdefault((nv.voted_view, nv.voted_digest),
                                  set()).add(voter)
        for (view, digest), signers in claims.items():
            if len(signers) >= self.quorum:
                qc = QuorumCertificate(view=view, block_digest=digest,
                                       signers=tuple(sorted(signers)))
                for peer in self.members:
                    if peer != self.node_id:
                        self._send(peer, self.control_bytes, "qc", qc)
                self._adopt_qc(qc)

    def on_view_timer(self, view: int) -> None:
        if not self.active or view < self.view:
            return
        self.timeouts_fired += 1
        next_view = self.view + 1
        self.view = next_view
        msg = NewView(view=next_view, high_qc=self.high_qc,
                      voted_view=self.voted_view,
                      voted_digest=self.voted_digest)
        target = self.leader_of(next_view)
        if target == self.node_id:
            self.on_new_view(msg, self.node_id)
        else:
            self._send(target, self.control_bytes, "new-view", msg)
        self._arm_timer()

    # -- chain state -------------------------------------------------------

    def _adopt_qc(self, qc: QuorumCertificate) -> None:
        self.qc_of.setdefault(qc.block_digest, qc)
        if qc.view > self.high_qc.view:
            self.high_qc = qc
        certified = self.blocks.get(qc.block_digest)
        if certified is not None:
            self._advance_locks_and_commits(certified)

    def _update_chain_state(self, block: Block) -> None:
        self._adopt_qc(block.justify)
        # A certificate for this block may have arrived first (the
        # proposer's uplink can lag the vote collector's); retry it now
        # that the commit walk can reach the block.
        qc = self.qc_of.get(block.digest)
        if qc is not None:
            self._adopt_qc(qc)

    def _advance_locks_and_commits(self, certified: Block) -> None:
        parent = self.blocks.get(certified.parent_digest)
        if parent is not None and certified.justify.view > self.locked_qc.view:
            self.locked_qc = certified.justify
        for blk in commit_candidates(certified, self.blocks,
                                     self._committed_digests):
            self._committed_digests.add(blk.digest)
            self.committed.append(blk)
            if self.on_commit is not None:
                self.on_commit(blk)

    def chain_payload_digests(self) -> set[str]:
        """Payload digests on the uncommitted tail of the certified chain."""
        out: set[str] = set()
        cursor = self.blocks.get(self.high_qc.block_digest)
        while cursor is not None and cursor.digest not in self._committed_digests:
            if cursor.payload is not None:
                out.add(cursor.payload.digest())
            cursor = self.blocks.get(cursor.parent_digest)
        return out

    def is_committed(self, payload_digest: str) -> bool:
        return any(b.payload is not None and b.payload.digest() == payload_digest
                   for b in self.committed)

    def has_uncommitted_payload(self) -> bool:
        """True while a payload block on the certified chain awaits commit.

        Drives idle view filler: the chain only needs extending when a real
        step is still short of its three-chain."""
        cursor = self.blocks.get(self.high_qc.block_digest)
        while cursor is not None:
            if (cursor.payload is not None
                    and cursor.digest not in self._committed_digests):
                return True
            if cursor.digest in self._committed_digests:
                return False
            cursor = self.blocks.get(cursor.parent_digest)
        return False
