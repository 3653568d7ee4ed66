"""Tests for the deterministic discrete-event network simulator.

Transfer-time values are frozen from the bandwidth model by hand:
megabytes are 10^6 bytes, megabits 10^6 bits, and a transfer occupies
the sender uplink serially, adds one propagation latency, then occupies
the receiver downlink serially.
"""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piratesim.netsim import MB, LinkProfile, SimClock

FAST = LinkProfile(uplink_mbps=240.0, downlink_mbps=1000.0, latency_ms=10.0)
SLOW = LinkProfile(uplink_mbps=80.0, downlink_mbps=1000.0, latency_ms=10.0)


def two_node_clock(link_a=FAST, link_b=FAST):
    clock = SimClock()
    log = []
    clock.register_node("a", link_a, lambda ev: log.append(ev))
    clock.register_node("b", link_b, lambda ev: log.append(ev))
    return clock, log


def test_single_transfer_slow_uplink():
    # 28 MB at 80 Mbps: 28e6*8/80e6 = 2.8 s uplink, 10 ms latency,
    # 0.224 s downlink at 1000 Mbps.
    clock, _ = two_node_clock(link_a=SLOW)
    t = clock.transfer_time(28 * MB, "a", "b")
    assert math.isclose(t, 3.034, rel_tol=0, abs_tol=1e-12)


def test_single_transfer_fast_uplink():
    clock, _ = two_node_clock()
    t = clock.transfer_time(28 * MB, "a", "b")
    assert math.isclose(t, 28 * 8 / 240 + 0.01 + 0.224, abs_tol=1e-12)
    assert math.isclose(t, 1.167333333333333, abs_tol=1e-12)


def test_uplink_is_serial():
    # second transfer on the same uplink starts after the first releases
    clock, _ = two_node_clock()
    first = clock.transfer_time(28 * MB, "a", "b")
    second = clock.transfer_time(28 * MB, "a", "b")
    up = 28 * 8 / 240
    assert math.isclose(first, up + 0.234, abs_tol=1e-12)
    assert math.isclose(second, 2 * up + 0.234, abs_tol=1e-12)


def test_serial_broadcast_to_forty_nine_receivers():
    clock = SimClock()
    clock.register_node(0, FAST, lambda ev: None)
    receivers = list(range(1, 50))
    for r in receivers:
        clock.register_node(r, FAST, lambda ev: None)
    times = clock.broadcast(0, receivers, 28 * MB, "blob")
    up = 28 * 8 / 240
    # i-th receiver (1-based) sees uplink release at i*up, then latency
    # and its own downlink occupancy
    for i, t in enumerate(times, start=1):
        assert math.isclose(t, i * up + 0.01 + 0.224, abs_tol=1e-9)
    assert math.isclose(times[-1], 49 * up + 0.234, abs_tol=1e-9)


def test_empty_broadcast_warns():
    clock, _ = two_node_clock()
    assert clock.broadcast("a", [], 100, "noop") == []
    assert len(clock.warnings) == 1
    assert "no receivers" in clock.warnings[0].message


def test_zero_size_message_costs_latency_only():
    clock, _ = two_node_clock()
    t = clock.transfer_time(0, "a", "b")
    assert math.isclose(t, 0.01, abs_tol=1e-15)


def test_negative_size_rejected():
    clock, _ = two_node_clock()
    with pytest.raises(ValueError):
        clock.transfer_time(-1, "a", "b")
    with pytest.raises(ValueError):
        clock.schedule_timer(-0.5, "a", "tick")


def test_send_start_cannot_precede_now():
    clock, _ = two_node_clock()
    clock.schedule_timer(5.0, "a", "tick")
    clock.run_until_idle()
    assert clock.now == 5.0
    with pytest.raises(ValueError):
        clock.transfer_time(10, "a", "b", send_start=1.0)


def test_same_time_events_fire_in_insertion_order():
    clock = SimClock()
    order = []
    clock.register_node("n", FAST, lambda ev: order.append(ev.tag))
    clock.schedule_timer(1.0, "n", "first")
    clock.schedule_timer(1.0, "n", "second")
    clock.schedule_timer(0.5, "n", "earlier")
    clock.run_until_idle()
    assert order == ["earlier", "first", "second"]


def test_cancel_skips_timer_without_firing():
    clock = SimClock()
    fired = []
    clock.register_node("n", FAST, lambda ev: fired.append(ev.tag))
    keep = clock.schedule_timer(1.0, "n", "keep")
    drop = clock.schedule_timer(0.5, "n", "drop")
    clock.cancel(drop)
    clock.run_until_idle()
    assert fired == ["keep"]
    assert keep.fire_time == 1.0


def test_horizon_truncates_and_reports():
    clock = SimClock()
    fired = []
    clock.register_node("n", FAST, lambda ev: fired.append(ev.tag))
    clock.schedule_timer(1.0, "n", "in-range")
    clock.schedule_timer(10.0, "n", "beyond")
    now, truncated = clock.run_until_idle(horizon=2.0)
    assert truncated
    assert now == 2.0
    assert fired == ["in-range"]
    assert clock.pending_events == 1


def test_run_to_idle_is_not_truncated():
    clock, _ = two_node_clock()
    clock.schedule_timer(3.0, "a", "tick")
    now, truncated = clock.run_until_idle()
    assert (now, truncated) == (3.0, False)


def test_all_scheduled_messages_dispatch():
    clock = SimClock()
    seen = []
    for n in range(4):
        clock.register_node(n, FAST, lambda ev: seen.append(ev))
    for i in range(10):
        clock.send(i % 4, (i + 1) % 4, 1000 * i, f"m{i}")
    clock.run_until_idle()
    assert clock.scheduled_messages == 10
    assert clock.dispatched_messages == 10
    assert len(seen) == 10


def test_message_carries_sender_and_payload():
    clock, log = two_node_clock()
    clock.send("a", "b", 500, "hello", payload={"x": 1})
    clock.run_until_idle()
    (ev,) = log
    assert ev.sender == "a"
    assert ev.target == "b"
    assert ev.payload == {"x": 1}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3),
                          st.integers(0, 10 * MB)),
                min_size=1, max_size=20))
def test_identical_schedules_reproduce_traces(sends):
    def run_once():
        clock = SimClock()
        times = []
        for n in range(4):
            clock.register_node(n, LinkProfile(uplink_mbps=100.0),
                                lambda ev: times.append(ev.fire_time))
        for src, dst, size in sends:
            clock.send(src, dst, size, "m")
        clock.run_until_idle()
        return times, clock.trace_digest(), clock.now
    a = run_once()
    b = run_once()
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 5 * MB), min_size=1, max_size=15))
def test_serial_uplink_preserves_order_and_spacing(sizes):
    clock = SimClock()
    deliveries = []
    clock.register_node("s", LinkProfile(uplink_mbps=100.0), lambda ev: None)
    clock.register_node("r", LinkProfile(uplink_mbps=100.0),
                        lambda ev: deliveries.append(ev))
    returned = [clock.send("s", "r", size, "m", payload=i)
                for i, size in enumerate(sizes)]
    clock.run_until_idle()
    # deliveries keep the send order and never run ahead of the sum of
    # serialized uplink durations
    assert [ev.payload for ev in deliveries] == list(range(len(sizes)))
    assert returned == sorted(returned)
    total_up = sum(s * 8 / 100e6 for s in sizes)
    assert returned[-1] >= total_up
