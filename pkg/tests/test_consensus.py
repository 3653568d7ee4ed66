"""Tests for the chained three-phase committee consensus core.

Replica tests run over a tiny synchronous message bus: outbound messages
queue in FIFO order and deliver instantly, timers are collected but only
fired explicitly, and per-node outbound drops emulate silent members.
"""

from collections import deque

import pytest

from piratesim.consensus import (GENESIS_DIGEST, GENESIS_QC, Block,
                                 CommitteeReplica, QuorumCertificate,
                                 StorageBreach, StorageTracker,
                                 commit_candidates, make_block, quorum,
                                 view_timeout_s)


def test_quorum_sizes():
    assert quorum(4) == 3
    assert quorum(7) == 5
    assert quorum(10) == 7
    assert quorum(50) == 34
    assert quorum(100) == 67


def test_view_timeout_budget():
    # 3 serial 1 MB payload pushes at 80 Mbps plus two 10 ms latencies,
    # with factor-4 headroom
    t = view_timeout_s(4, 1_000_000, 80.0, 0.01, factor=4.0)
    assert t == pytest.approx(4 * (3 * 8 / 80 + 0.02))


def chain_of_views(views, start_parent=GENESIS_DIGEST):
    """Build a parent-linked chain of empty blocks at the given views."""
    blocks = {}
    parent = start_parent
    parent_qc = GENESIS_QC
    out = []
    for v in views:
        b = make_block(view=v, parent_digest=parent, justify=parent_qc,
                       proposer=v % 4, payload=None)
        blocks[b.digest] = b
        out.append(b)
        parent = b.digest
        parent_qc = QuorumCertificate(view=v, block_digest=b.digest,
                                      signers=(0, 1, 2))
    return blocks, out


def test_commit_candidates_consecutive_three_chain():
    blocks, chain = chain_of_views([1, 2, 3])
    got = commit_candidates(chain[2], blocks)
    assert [b.view for b in got] == [1]


def test_commit_candidates_requires_consecutive_views():
    blocks, chain = chain_of_views([1, 2, 4])
    assert commit_candidates(chain[2], blocks) == []
    blocks, chain = chain_of_views([1, 3, 4])
    assert commit_candidates(chain[2], blocks) == []


def test_commit_candidates_carries_ancestors():
    # gap between 2 and 5: the later consecutive triple commits the
    # stranded ancestors as well
    blocks, chain = chain_of_views([1, 2, 5, 6, 7])
    got = commit_candidates(chain[4], blocks)
    assert [b.view for b in got] == [1, 2, 5]


def test_commit_candidates_skips_already_committed():
    blocks, chain = chain_of_views([1, 2, 3, 4])
    first = commit_candidates(chain[2], blocks)
    done = {b.digest for b in first} | {GENESIS_DIGEST}
    second = commit_candidates(chain[3], blocks, committed=done)
    assert [b.view for b in second] == [2]


def test_commit_candidates_needs_known_ancestors():
    blocks, chain = chain_of_views([1, 2, 3])
    del blocks[chain[0].digest]
    assert commit_candidates(chain[2], blocks) == []


def test_make_block_digest_is_deterministic_and_content_bound():
    a = make_block(1, GENESIS_DIGEST, GENESIS_QC, 0, None)
    b = make_block(1, GENESIS_DIGEST, GENESIS_QC, 0, None)
    c = make_block(2, GENESIS_DIGEST, GENESIS_QC, 0, None)
    assert a.digest == b.digest
    assert a.digest != c.digest


# -- storage accounting -------------------------------------------------------


def test_tracker_counts_each_key_once():
    t = StorageTracker(0, payload_bytes=100, cap_payloads=12)
    t.retain("a")
    t.retain("a")
    assert t.current_bytes == 100
    t.release("a")
    assert t.current_bytes == 100   # one reference still held
    t.release("a")
    assert t.current_bytes == 0
    t.release("a")                  # over-release is a no-op
    assert t.current_bytes == 0


def test_tracker_peak_and_cap():
    t = StorageTracker(0, payload_bytes=100, cap_payloads=3)
    for key in ("a", "b", "c"):
        t.retain(key)
    assert t.peak_bytes == 300
    with pytest.raises(StorageBreach):
        t.retain("d")
    t.release("a")
    t.retain("d")
    assert t.current_bytes == 300
    assert set(t.held_keys()) == {"b", "c", "d"}


def test_tracker_transient_is_separate_diagnostic():
    t = StorageTracker(0, payload_bytes=100, cap_payloads=1)
    t.transient_add(10_000)
    t.transient_add(5_000)
    t.transient_remove(10_000)
    assert t.transient_peak == 15_000
    assert t.transient_bytes == 5_000
    assert t.current_bytes == 0     # transients never hit the cap


def test_tracker_custom_sizes_and_release_all():
    t = StorageTracker(0, payload_bytes=100, cap_payloads=12)
    t.retain("small", nbytes=1)
    t.retain("big", nbytes=500)
    assert t.current_bytes == 501
    t.release_all()
    assert t.current_bytes == 0
    assert t.held_keys() == ()


# -- replica message handling over a synchronous bus -------------------------


class Bus:
    def __init__(self, size=4, view_timeout=10.0, **replica_kw):
        self.members = tuple(range(size))
        self.queue = deque()
        self.drop_from = set()
        self.timers = {m: [] for m in self.members}
        self.commits = {m: [] for m in self.members}
        self.reports = []
        self.replicas = {}
        for m in self.members:
            self.replicas[m] = CommitteeReplica(
                m, self.members,
                now=lambda: 0.0,
                send=self._sender(m),
                set_timer=self._timer_setter(m),
                cancel_timer=lambda handle: None,
                view_timeout=view_timeout,
                on_commit=self.commits[m].append,
                on_misbehavior=self.reports.append,
                **replica_kw)

    def _sender(self, src):
        def send(dst, nbytes, tag, payload):
            if src not in self.drop_from:
                self.queue.append((src, dst, tag, payload))
        return send

    def _timer_setter(self, node):
        def set_timer(delay, tag, payload):
            handle = (node, tag, payload)
            self.timers[node].append(handle)
            return handle
        return set_timer

    def deliver_all(self):
        while self.queue:
            src, dst, tag, payload = self.queue.popleft()
            self.replicas[dst].on_message(tag, payload, src)

    def run_leaders(self, rounds, payload=None):
        """Let the current leader of each view propose, like the engine
        would, and flush messages in between."""
        proposed = set()
        for _ in range(rounds):
            self.deliver_all()
            for rep in self.replicas.values():
                if (rep.is_leader() and rep.ready_to_lead()
                        and rep.view not in proposed):
                    proposed.add(rep.view)
                    rep.propose(payload)
            self.deliver_all()

    def committed_views(self, node):
        return [b.view for b in self.commits[node]]


def test_happy_path_pipelines_commits():
    bus = Bus()
    bus.run_leaders(rounds=6)
    # six pipelined views; the consecutive three-chain commits all but
    # the freshest two blocks
    for m in bus.members:
        assert bus.committed_views(m) == [1, 2, 3, 4]
    assert bus.reports == []


def test_commit_sequences_are_prefix_consistent_everywhere():
    bus = Bus()
    bus.run_leaders(rounds=5)
    seqs = [[b.digest for b in bus.commits[m]] for m in bus.members]
    longest = max(seqs, key=len)
    for s in seqs:
        assert longest[:len(s)] == s


def test_vote_quorum_forms_certificate_and_relays_it():
    bus = Bus()
    bus.run_leaders(rounds=1)
    b1 = next(b for b in bus.replicas[0].blocks.values() if b.view == 1)
    for rep in bus.replicas.values():
        qc = rep.qc_of.get(b1.digest)
        assert qc is not None
        assert qc.view == 1
        assert len(qc.signers) >= 3


def test_verify_qc_rules():
    rep = Bus().replicas[0]
    ok = QuorumCertificate(view=1, block_digest="x", signers=(0, 1, 2))
    assert rep.verify_qc(ok)
    assert rep.verify_qc(GENESIS_QC)    # genesis needs no signers
    dup = QuorumCertificate(view=1, block_digest="x", signers=(0, 1, 1))
    assert not rep.verify_qc(dup)
    foreign = QuorumCertificate(view=1, block_digest="x", signers=(0, 1, 9))
    assert not rep.verify_qc(foreign)
    thin = QuorumCertificate(view=1, block_digest="x", signers=(0, 1))
    assert not rep.verify_qc(thin)


def test_forged_and_duplicate_votes_are_handled():
    bus = Bus()
    rep = bus.replicas[2]   # leader of view 2 collects view-1 votes
    from piratesim.consensus import Vote
    v = Vote(view=1, block_digest="bbb", voter=0)
    rep.on_vote(v, sender=1)    # sender claims someone else's vote
    assert any(r.kind == "forged-vote" for r in bus.reports)
    rep.on_vote(v, sender=0)
    rep.on_vote(v, sender=0)    # duplicate does not double-count
    assert len(rep._votes[(1, "bbb")]) == 1


def test_non_leader_proposal_rejected():
    bus = Bus()
    rogue = make_block(view=1, parent_digest=GENESIS_DIGEST,
                       justify=GENESIS_QC, proposer=3, payload=None)
    bus.replicas[0].on_proposal(rogue, 3)
    assert any(r.kind == "not-leader" for r in bus.reports)
    assert rogue.digest not in bus.replicas[0].blocks


def test_bad_justify_and_parent_mismatch_rejected():
    bus = Bus()
    thin_qc = QuorumCertificate(view=1, block_digest="x", signers=(0,))
    bad = make_block(view=2, parent_digest="x", justify=thin_qc,
                     proposer=2, payload=None)
    bus.replicas[0].on_proposal(bad, 2)
    assert any(r.kind == "bad-justify" for r in bus.reports)
    mismatch = make_block(view=1, parent_digest="elsewhere",
                          justify=GENESIS_QC, proposer=1, payload=None)
    bus.replicas[0].on_proposal(mismatch, 1)
    assert any(r.kind == "parent-mismatch" for r in bus.reports)


def test_equivocating_leader_cannot_certify_either_fork():
    bus = Bus()
    leader = bus.replicas[1]
    from piratesim.consensus import StepPayload
    fork_a = leader.build_block(None)
    fork_b = make_block(view=1, parent_digest=GENESIS_DIGEST,
                        justify=GENESIS_QC, proposer=1,
                        payload=StepPayload(
                            kind="gather", iteration=0, stream_id=0, visit=0,
                            chunk=0, selection=(), comp2_digest=None,
                            comp3_digest="d", comp3_count=1,
                            model_digest="m"))
    leader.broadcast_proposal(fork_a, targets=(0, 1))
    leader.broadcast_proposal(fork_b, targets=(2, 3))
    bus.deliver_all()
    # each honest node voted for the fork it saw first and refuses the
    # other; neither fork reaches the quorum of 3
    collector = bus.replicas[2]
    for key, voters in collector._votes.items():
        assert len(voters) < 3
    assert all(rep.qc_of.get(fork_a.digest) is None
               and rep.qc_of.get(fork_b.digest) is None
               for rep in bus.replicas.values())
    # cross-delivery is eventually noticed
    bus.replicas[0].on_proposal(fork_b, 1)
    assert any(r.kind == "equivocation" for r in bus.reports)


def test_view_timeout_sends_new_view_and_recovers_liveness():
    # five members so three certified views fit before the silent node
    # rotates into the vote-collector role
    bus = Bus(size=5)
    bus.drop_from.add(1)        # leader of view 1 stays silent
    for m in (0, 2, 3, 4):
        bus.replicas[m].on_view_timer(bus.replicas[m].view)
    bus.deliver_all()
    # quorum of view-change messages authorizes the view-2 leader
    leader2 = bus.replicas[2]
    assert leader2.view == 2
    assert leader2.ready_to_lead()
    bus.run_leaders(rounds=6)
    for m in (0, 2, 3, 4):
        assert 2 in bus.committed_views(m)  # chain advanced past the hole


def test_new_view_attestations_rebuild_swallowed_certificate():
    bus = Bus()
    # view 1 proposes and certifies normally, but the vote collector
    # (leader of view 2) swallows everything it should relay
    bus.drop_from.add(2)
    bus.replicas[1].propose(None)
    bus.deliver_all()
    assert bus.replicas[2].high_qc.view == 1      # collector knows the QC
    assert bus.replicas[0].high_qc.view == 0      # nobody else does
    # peers give up on view 2's silent leader; the attestations inside
    # their view-change messages let the view-3 leader resurrect the QC
    for m in (0, 1, 3):
        bus.replicas[m].on_view_timer(bus.replicas[m].view)
    bus.deliver_all()
    leader3 = bus.replicas[3]
    assert leader3.high_qc.view == 1
    assert leader3.ready_to_lead()
    # with the collector back online the chain extends the resurrected
    # certificate and retroactively commits the view-1 block
    bus.drop_from.clear()
    bus.run_leaders(rounds=6)
    for m in bus.members:
        assert 1 in bus.committed_views(m)


def test_late_proposal_still_collects_vote():
    bus = Bus()
    bus.run_leaders(rounds=2)
    straggler = bus.replicas[3]
    block2 = next(b for b in bus.replicas[0].blocks.values() if b.view == 2)
    # wind the straggler past view 2, as if the proposal had been held
    # back by a data-availability gap
    straggler._enter_view(4)
    straggler.blocks.pop(block2.digest)
    straggler.voted_view = 1
    before = straggler.votes_cast
    straggler.on_proposal(block2, sender=2)
    assert straggler.votes_cast == before + 1
    assert straggler.voted_view == 2
    assert straggler.view == 4      # late vote does not rewind the view


def test_orphan_proposal_waits_for_missing_parent():
    bus = Bus()
    requested = []
    rep = bus.replicas[0]
    rep.request_block = lambda digest, holder: requested.append(digest)
    b1 = make_block(1, GENESIS_DIGEST, GENESIS_QC, 1, None)
    qc1 = QuorumCertificate(view=1, block_digest=b1.digest, signers=(0, 1, 2))
    b2 = make_block(2, b1.digest, qc1, 2, None)
    rep.on_proposal(b2, 2)
    assert b2.digest not in rep.blocks
    assert requested == [b1.digest]
    rep.on_proposal(b1, 1)
    assert b1.digest in rep.blocks
    assert b2.digest in rep.blocks  # orphan resolved behind its parent


def test_halted_replica_ignores_everything():
    bus = Bus()
    rep = bus.replicas[0]
    rep.halt()
    b1 = make_block(1, GENESIS_DIGEST, GENESIS_QC, 1, None)
    rep.on_message("proposal", b1, 1)
    assert b1.digest not in rep.blocks
    rep.on_message("view-timer", rep.view, -1)
    assert rep.timeouts_fired == 0


def test_lock_advances_on_two_chain():
    bus = Bus()
    bus.run_leaders(rounds=5)
    rep = bus.replicas[0]
    # with views 1..5 certified, the lock trails the highest certificate
    # by one view (two-chain rule)
    assert rep.locked_qc.view >= rep.high_qc.view - 1 >= 3
