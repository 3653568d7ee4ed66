"""Deterministic discrete-event network simulator.

Time is simulated seconds. Bandwidth units are megabits per second with
MB = 10^6 bytes and Mbps = 10^6 bits/s. Links never drop messages; cost
comes from serial uplink/downlink occupancy plus a fixed propagation
latency. Event ordering is (fire_time, insertion sequence), so two runs
with the same schedule produce identical traces.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

MB = 1_000_000          # bytes
MEGABIT = 1_000_000.0   # bits


@dataclass(frozen=True)
class LinkProfile:
    """Access-link characteristics of one node."""

    uplink_mbps: float
    downlink_mbps: float = 1000.0
    latency_ms: float = 10.0

    @property
    def latency_s(self) -> float:
        return self.latency_ms / 1000.0


@dataclass(order=True)
class SimEvent:
    fire_time: float
    seq: int
    kind: str = field(compare=False)            # "message" | "timer"
    target: Any = field(compare=False)          # node id
    tag: str = field(compare=False)
    payload: Any = field(compare=False, default=None)
    sender: Any = field(compare=False, default=None)
    canceled: bool = field(compare=False, default=False)


@dataclass
class WarningRecord:
    time: float
    message: str


class SimClock:
    """Event queue plus per-node serial link occupancy."""

    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[SimEvent] = []
        self._seq = 0
        self._uplink_busy: dict[Any, float] = {}
        self._downlink_busy: dict[Any, float] = {}
        self._links: dict[Any, LinkProfile] = {}
        self._handlers: dict[Any, Callable[[SimEvent], None]] = {}
        self.warnings: list[WarningRecord] = []
        self.scheduled_messages = 0
        self.dispatched_messages = 0
        self._trace = hashlib.sha256()

    # -- topology ----------------------------------------------------------

    def register_node(self, node_id: Any, link: LinkProfile,
                      handler: Callable[[SimEvent], None]) -> None:
        self._links[node_id] = link
        self._handlers[node_id] = handler
        self._uplink_busy.setdefault(node_id, 0.0)
        self._downlink_busy.setdefault(node_id, 0.0)

    def link(self, node_id: Any) -> LinkProfile:
        return self._links[node_id]

    # -- scheduling --------------------------------------------------------

    def _push(self, event: SimEvent) -> None:
        heapq.heappush(self._heap, event)

    def schedule_timer(self, delay: float, target: Any, tag: str,
                       payload: Any = None) -> SimEvent:
        if delay < 0:
            raise ValueError("timer delay must be >= 0")
        ev = SimEvent(self.now + delay, self._seq, "timer", target, tag, payload)
        self._seq += 1
        self._push(ev)
        return ev

    def cancel(self, event: SimEvent) -> None:
        """Retire a pending timer; it is skipped without advancing time."""
        event.canceled = True

    def transfer_time(self, size_bytes: int, sender: Any, receiver: Any,
                      send_start: Optional[float] = None) -> float:
        """Reserve one uplink and one downlink slot; return delivery time.

        The sender's uplink is occupied serially for size/uplink_bw starting
        at max(send_start, current uplink busy-until). Propagation latency is
        added once, then the receiver's downlink is occupied serially for
        size/downlink_bw, starting no earlier than uplink release + latency.
        Delivery is the downlink release instant.
        """
        if size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")
        start = self.now if send_start is None else send_start
        if start < self.now:
            raise ValueError("send_start must not precede current time")
        up = self._links[sender]
        down = self._links[receiver]
        up_start = max(start, self._uplink_busy[sender])
        up_dur = size_bytes * 8 / (up.uplink_mbps * MEGABIT)
        up_release = up_start + up_dur
        self._uplink_busy[sender] = up_release
        dl_start = max(up_release + up.latency_s, self._downlink_busy[receiver])
        dl_dur = size_bytes * 8 / (down.downlink_mbps * MEGABIT)
        delivery = dl_start + dl_dur
        self._downlink_busy[receiver] = delivery
        return delivery

    def send(self, sender: Any, receiver: Any, size_bytes: int, tag: str,
             payload: Any = None, send_start: Optional[float] = None) -> float:
        """Schedule one message delivery; returns the delivery time."""
        delivery = self.transfer_time(size_bytes, sender, receiver, send_start)
        ev = SimEvent(delivery, self._seq, "message", receiver, tag, payload, sender)
        self._seq += 1
        self._push(ev)
        self.scheduled_messages += 1
        return delivery

    def broadcast(self, sender: Any, receivers: list, size_bytes: int, tag: str,
                  payload: Any = None) -> list[float]:
        """Serial uplink broadcast in the given deterministic receiver order."""
        if not receivers:
            self.warnings.append(WarningRecord(self.now, f"broadcast[{tag}] with no receivers"))
            return []
        return [self.send(sender, r, size_bytes, tag, payload) for r in receivers]

    # -- execution ---------------------------------------------------------

    def run_until_idle(self, horizon: Optional[float] = None) -> tuple[float, bool]:
        """Dispatch events in order; returns (final time, truncated flag)."""
        truncated = False
        while self._heap:
            ev = self._heap[0]
            if ev.canceled:
                heapq.heappop(self._heap)
                continue
            if horizon is not None and ev.fire_time > horizon:
                truncated = True
                self.now = horizon
                break
            heapq.heappop(self._heap)
            if ev.fire_time < self.now:
                raise RuntimeError("clock would move backwards")
            self.now = ev.fire_time
            if ev.kind == "message":
                self.dispatched_messages += 1
            self._trace.update(
                f"{ev.fire_time:.9f}|{ev.kind}|{ev.target}|{ev.tag}".encode())
            handler = self._handlers.get(ev.target)
            if handler is not None:
                handler(ev)
        return self.now, truncated

    @property
    def pending_events(self) -> int:
        return sum(1 for ev in self._heap if not ev.canceled)

    def trace_digest(self) -> str:
        return self._trace.hexdigest()
