"""Blockchain-SGD baseline with a single global chain ("learningchain").

Every iteration, all nodes broadcast their local gradients to everyone,
a lottery-elected leader mines one block holding the n submitted gradients
plus its l-nearest aggregate, and ships the block by value to every node.
Each node appends the block to its full local chain copy, so per-node
storage grows by (n + 1) payloads every iteration; that unbounded history
is the protocol's defining cost and is reported exactly.
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional

import numpy as np

from . import adversary as adv
from .aggregation import AggregatorSpec, Gradient, aggregate
from .config import STREAM_IDS, RunConfig, rng_stream
from .engine import RunResult
from .metrics import MetricsRow
from .netsim import LinkProfile, SimClock, SimEvent
from .training import (ModelState, apply_update, local_gradient, make_task,
                       stable_learning_rate)


class LearningChainEngine:
    """One configured run of the single-chain baseline."""

    def __init__(self, cfg: RunConfig):
        if cfg.protocol != "learningchain":
            raise ValueError("baseline requires protocol 'learningchain'")
        self.cfg = cfg
        self.clock = SimClock()
        self.payload_bytes = cfg.payload_bytes
        self.control_bytes = cfg.consensus.control_bytes
        self.l = max(1, math.ceil(cfg.l_fraction * cfg.nodes))
        self.spec = AggregatorSpec(kind="l-nearest", l=self.l)

        self.rng_lottery = rng_stream(cfg.seed, "lottery")
        self.rng_adversary = rng_stream(cfg.seed, "adversary")
        self.rng_batch = rng_stream(cfg.seed, "batch")
        rng_uplinks = rng_stream(cfg.seed, "uplinks")

        net = cfg.network
        self.links = [LinkProfile(
            uplink_mbps=float(rng_uplinks.uniform(net.uplink_mbps_min,
                                                  net.uplink_mbps_max)),
            downlink_mbps=net.downlink_mbps, latency_ms=net.latency_ms)
            for _ in range(cfg.nodes)]
        for m in range(cfg.nodes):
            self.clock.register_node(m, self.links[m], self._handler)

        self.task = make_task(
            cfg.training.task, cfg.nodes, cfg.training.dimension,
            cfg.training.samples_per_node,
            np.random.SeedSequence((cfg.seed, STREAM_IDS["task-data"])),
            noise_std=cfg.training.noise_std, sharding=cfg.training.sharding)
        self.model = ModelState(params=np.zeros(cfg.training.dimension))
        self.lr = (cfg.training.learning_rate
                   if cfg.training.learning_rate is not None
                   else stable_learning_rate(self.task))

        byz: set[int] = set()
        if cfg.adversary.count:
            chosen = self.rng_adversary.choice(cfg.nodes,
                                               size=cfg.adversary.count,
                                               replace=False)
            byz = {int(x) for x in chosen}
        self.byzantine = tuple(sorted(byz))
        self.strategy: Optional[adv.ByzantineStrategy] = None
        if byz:
            a = cfg.adversary
            self.strategy = adv.ByzantineStrategy(
                kind=a.strategy, magnitude=a.magnitude,
                target_kind=a.target_kind,
                target_vector=(np.asarray(a.target_vector, dtype=np.float64)
                               if a.target_vector is not None else None),
                noise_scale=a.noise_scale,
                contaminate_at_iteration=a.contaminate_at_iteration)

        self.iteration = 0
        self.leader = 0
        self.gradients: dict[int, Gradient] = {}
        self.received: dict[int, set[int]] = {}
        self.block_seen: set[int] = set()
        self.chain: list[str] = []
        self.rows: list[MetricsRow] = []
        self.iteration_times: list[float] = []
        self.update_log: list[np.ndarray] = []
        self._iteration_started_at = 0.0

    # The chain is append-only and identical at every node, so one record
    # per iteration stands in for n per-node copies.
    def chain_bytes(self, iterations: int) -> int:
        return (self.cfg.nodes + 1) * self.payload_bytes * iterations

    def _handler(self, event: SimEvent) -> None:
        if event.tag == "gossip-start":
            self._gossip_start(event.target)
        elif event.tag == "gossip":
            self._on_gossip(event.target, event.payload)
        elif event.tag == "mine-done":
            self._publish_block(event.payload)
        elif event.tag == "block":
            self._on_block(event.target, event.payload)
        else:
            raise RuntimeError(f"unknown event tag {event.tag!r}")

    def _start_iteration(self) -> None:
        self.iteration += 1
        self._iteration_started_at = self.clock.now
        self.gradients = {}
        self.received = {m: set() for m in range(self.cfg.nodes)}
        self.block_seen = set()
        self.leader = int(self.rng_lottery.integers(self.cfg.nodes))
        shadow = ModelState(self.model.params, iteration=self.iteration)
        for m in range(self.cfg.nodes):
            grad = local_gradient(self.task, shadow, m, self.payload_bytes,
                                  batch_size=self.cfg.training.batch_size,
                                  batch_rng=self.rng_batch)
            if m in self.byzantine:
                grad = adv.corrupt_gradient(grad, self.strategy,
                                            self.rng_adversary)
            self.gradients[m] = grad
            self.clock.schedule_timer(self.cfg.training.compute_time_s, m,
                                      "gossip-start")

    def _gossip_start(self, m: int) -> None:
        self.received[m].add(m)
        peers = [p for p in range(self.cfg.nodes) if p != m]
        self.clock.broadcast(m, peers, self.payload_bytes, "gossip",
                             (self.iteration, m))
        self._check_leader_ready(m)

    def _on_gossip(self, m: int, payload: tuple[int, int]) -> None:
        iteration, origin = payload
        if iteration != self.iteration:
            return
        self.received[m].add(origin)
        self._check_leader_ready(m)

    def _check_leader_ready(self, m: int) -> None:
        if m != self.leader or len(self.received[m]) < self.cfg.nodes:
            return
        self.clock.schedule_timer(self.cfg.mining_delay_s, m, "mine-done",
                                  self.iteration)

    def _publish_block(self, iteration: int) -> None:
        if iteration != self.iteration:
            return
        inputs = [self.gradients[m] for m in sorted(self.gradients)]
        result = aggregate(self.spec, inputs)
        values = result.gradient.values
        digest = hashlib.sha256(
            f"{self.iteration}|{self.leader}|"
            f"{values.astype('<f8').tobytes().hex()}".encode()
        ).hexdigest()[:16]
        block = (self.iteration, digest, values)
        peers = [p for p in range(self.cfg.nodes) if p != self.leader]
        size = self.payload_bytes + self.control_bytes
        self.clock.broadcast(self.leader, peers, size, "block", block)
        self._on_block(self.leader, block)

    def _on_block(self, m: int, block: tuple[int, str, np.ndarray]) -> None:
        iteration, digest, agg = block
        if iteration != self.iteration or m in self.block_seen:
            return
        self.block_seen.add(m)
        if len(self.block_seen) == self.cfg.nodes:
            self.chain.append(digest)
            self._finalize_iteration(agg)

    def _finalize_iteration(self, agg: np.ndarray) -> None:
        apply_update(self.model, agg, self.lr)
        self.update_log.append(agg)
        self.iteration_times.append(self.clock.now - self._iteration_started_at)
        self.rows.append(MetricsRow(
            iteration=self.iteration,
            simulated_time_s=self.clock.now,
            per_node_storage_bytes=self.chain_bytes(self.iteration),
            global_loss=self.task.loss(self.model.params),
            committed_blocks=1,
            rejected_blocks=0,
            evictions=0))
        if self.iteration < self.cfg.iterations:
            self._start_iteration()

    def run(self) -> RunResult:
        cfg = self.cfg
        self._start_iteration()
        if cfg.horizon_s is not None:
            horizon = cfg.horizon_s
        else:
            slowest = min(link.uplink_mbps for link in self.links)
            push = (cfg.nodes - 1) * self.payload_bytes * 8.0 / (slowest * 1e6)
            horizon = 2.0 * cfg.iterations * (cfg.training.compute_time_s
                                              + cfg.mining_delay_s
                                              + 2.0 * push + 60.0)
        _, truncated = self.clock.run_until_idle(horizon)
        return RunResult(
            config=cfg,
            rows=self.rows,
            final_params=self.model.params.copy(),
            final_loss=self.task.loss(self.model.params),
            trace_digest=self.clock.trace_digest(),
            truncated=truncated,
            iteration_times=self.iteration_times,
            update_log=self.update_log,
            selections_log=[],
            peak_retained_bytes=self.chain_bytes(len(self.rows)),
            transient_peak_bytes=0,
            handoff_log=[],
            committee_members=[tuple(range(cfg.nodes))],
            byzantine_nodes=self.byzantine,
            committed_sequences={m: list(self.chain)
                                 for m in range(cfg.nodes)},
            liveness_log=[],
            step_weight_log=[],
            misbehavior=[],
            qc_conflicts=0,
            falsified_commits=0,
            fallback_queries=0,
            timeouts_fired=0,
            evictions_total=0,
            skipped_updates=self.model.skipped_updates,
            committed_payload_blocks=len(self.rows),
            credit_records={})


def run_learningchain(cfg: RunConfig) -> RunResult:
    return LearningChainEngine(cfg).run()
