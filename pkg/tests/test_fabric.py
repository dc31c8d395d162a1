"""Fabric primitives: flit quantization, link timing, arbitration, events.

Timing oracle, computed by hand from the link model (store-and-forward,
integer-ns ceil division):

    full 128 B burst = 1 header flit + 8 payload flits = 9 flits = 144 B
    at 450_000 B/us:  ser = ceil(144 * 1000 / 450_000) = 1 ns
    at 112_500 B/us:  ser = ceil(144 * 1000 / 112_500) = 2 ns
    arrival = t_issue + ser + latency
"""

import pytest

from mergesim.errors import InternalFault
from mergesim.fabric import (
    EV_ARRIVE,
    EV_GPU,
    EV_LINK_FREE,
    EV_SCAN,
    EV_SWITCH,
    EventQueue,
    Link,
    Packet,
    PacketKind,
    Topology,
    VcClass,
    VcQueues,
    channel_for,
    packet_flits,
    route_switch,
)


def drain(engine):
    while engine.advance():
        pass


def make_link(bw=450_000, latency=250, sink=None):
    engine = EventQueue()
    arrivals = []
    link = Link(0, gpu=0, switch=0, up=True,
                bandwidth_bytes_per_us=bw, latency_ns=latency,
                engine=engine, deliver=lambda pkt, lk: arrivals.append((engine.now, pkt)),
                sink=sink)
    return engine, link, arrivals


# --- flit quantization -------------------------------------------------

def test_packet_flits_header_only():
    assert packet_flits(0) == 1


def test_packet_flits_full_burst():
    assert packet_flits(128) == 9


def test_packet_flits_partial_rounds_up():
    assert packet_flits(1) == 2
    assert packet_flits(16) == 2
    assert packet_flits(17) == 3
    assert packet_flits(127) == 9


def test_packet_flits_rejects_oversize():
    with pytest.raises(InternalFault):
        packet_flits(129)
    with pytest.raises(InternalFault):
        packet_flits(-1)


# --- serialization / arrival timing ------------------------------------

def test_serialization_full_burst_at_aggregate_bw():
    _, link, _ = make_link(bw=450_000)
    assert link.serialization_ns(9) == 1


def test_serialization_full_burst_at_quarter_bw():
    _, link, _ = make_link(bw=112_500)
    assert link.serialization_ns(9) == 2


def test_arrival_time_is_ser_plus_latency():
    engine, link, arrivals = make_link(bw=112_500, latency=250)
    link.send(Packet(PacketKind.RED_REQ, 0, 1, payload=128))
    drain(engine)
    assert [t for t, _ in arrivals] == [252]


def test_back_to_back_packets_serialize():
    # Second packet waits for the serializer, not for the first arrival.
    engine, link, arrivals = make_link(bw=112_500, latency=250)
    link.send(Packet(PacketKind.RED_REQ, 0, 1, payload=128))
    link.send(Packet(PacketKind.RED_REQ, 0, 1, payload=128))
    drain(engine)
    assert [t for t, _ in arrivals] == [252, 254]


def test_flit_conservation():
    engine, link, arrivals = make_link()
    for i in range(50):
        link.send(Packet(PacketKind.LOAD_REQ, 0, 1, payload=(i % 9) * 16))
    drain(engine)
    assert len(arrivals) == 50
    assert link.flits_injected == link.flits_delivered
    assert link.flits_injected == sum(pkt.flits for _, pkt in arrivals)


def test_round_robin_is_fair_across_channels():
    # 500 packets staged on each of two channels; strict alternation means
    # every delivery prefix is balanced to within one packet.
    engine, link, arrivals = make_link(bw=112_500)
    for _ in range(500):
        link.send(Packet(PacketKind.LOAD_REQ, 0, 1, payload=128, vc=0))
    for _ in range(500):
        link.send(Packet(PacketKind.RED_REQ, 0, 1, payload=128, vc=1))
    drain(engine)
    assert len(arrivals) == 1000
    a = b = 0
    for _, pkt in arrivals:
        if pkt.vc == 0:
            a += 1
        else:
            b += 1
        assert abs(a - b) <= 1
    assert a == b == 500


def test_control_channel_never_waits_behind_data_backlog():
    # A long data backlog on channel 0 must not starve channel 7: the very
    # next serializer slot after the control packet is staged goes to it.
    engine, link, arrivals = make_link(bw=112_500)
    for _ in range(100):
        link.send(Packet(PacketKind.RED_REQ, 0, 1, payload=128, vc=0))
    link.send(Packet(PacketKind.SYNC_REQ, 0, 1, payload=0, vc=7))
    drain(engine)
    control_pos = next(i for i, (_, p) in enumerate(arrivals) if p.vc == 7)
    assert control_pos <= 2


# --- virtual channel queues ---------------------------------------------

def test_vc_queue_fifo_per_channel():
    q = VcQueues(n=2, depth_flits=None)
    p1 = Packet(PacketKind.LOAD_REQ, 0, 1, addr=1, vc=0)
    p2 = Packet(PacketKind.LOAD_REQ, 0, 1, addr=2, vc=0)
    q.push(p1)
    q.push(p2)
    assert q.pop(0) is p1
    assert q.pop(0) is p2


def test_vc_queue_depth_bound_refuses_overflow():
    q = VcQueues(n=1, depth_flits=10)
    assert q.push(Packet(PacketKind.RED_REQ, 0, 1, payload=128, vc=0))  # 9 flits
    assert not q.push(Packet(PacketKind.RED_REQ, 0, 1, payload=128, vc=0))
    assert q.push(Packet(PacketKind.SYNC_REQ, 0, 1, payload=0, vc=0))  # 1 flit fits


def test_vc_queue_occupancy_tracks_flits():
    q = VcQueues(n=1, depth_flits=None)
    q.push(Packet(PacketKind.RED_REQ, 0, 1, payload=128, vc=0))
    q.push(Packet(PacketKind.SYNC_REQ, 0, 1, payload=0, vc=0))
    assert q.occupancy[0] == 10
    q.pop(0)
    assert q.occupancy[0] == 1
    q.pop(0)
    assert q.occupancy[0] == 0
    assert q.high_water == 10


# --- channel policy ------------------------------------------------------

def test_control_always_rides_channel_7():
    assert channel_for(VcClass.CONTROL, class_separation=False) == 7
    assert channel_for(VcClass.CONTROL, class_separation=True) == 7


def test_class_separation_splits_load_and_reduction():
    assert channel_for(VcClass.LOAD, class_separation=False) == 0
    assert channel_for(VcClass.REDUCTION, class_separation=False) == 0
    assert channel_for(VcClass.LOAD, class_separation=True) == 0
    assert channel_for(VcClass.REDUCTION, class_separation=True) == 1


# --- routing --------------------------------------------------------------

def test_route_interleaves_by_256_byte_blocks():
    assert route_switch(0, 4) == 0
    assert route_switch(255, 4) == 0
    assert route_switch(256, 4) == 1
    assert route_switch(1024, 4) == 0


def test_route_is_position_only():
    # Identical for every caller: two "GPUs" computing the route for the
    # same address always converge on the same switch.
    for addr in range(0, 8192, 64):
        assert route_switch(addr, 4) == route_switch(addr, 4)


def test_topology_enumerates_every_direction():
    topo = Topology(n_gpus=4, n_switches=2, bandwidth_bytes_per_us=450_000,
                    latency_ns=250)
    links = topo.links()
    assert len(links) == 4 * 2 * 2
    assert (0, 0, "up") in links and (3, 1, "down") in links


# --- event engine ---------------------------------------------------------

def test_event_order_at_equal_timestamp():
    engine = EventQueue()
    order = []
    engine.push(5, EV_SCAN, 0, lambda _: order.append("scan"))
    engine.push(5, EV_ARRIVE, 9, lambda _: order.append("arrive"))
    engine.push(5, EV_GPU, 0, lambda _: order.append("gpu"))
    engine.push(5, EV_SWITCH, 0, lambda _: order.append("switch"))
    engine.push(5, EV_LINK_FREE, 0, lambda _: order.append("free"))
    assert engine.advance() == 5
    assert order == ["arrive", "free", "switch", "gpu", "scan"]


def test_event_ties_break_by_actor_then_push_order():
    engine = EventQueue()
    order = []
    engine.push(1, EV_GPU, 2, lambda _: order.append("g2"))
    engine.push(1, EV_GPU, 1, lambda _: order.append("g1a"))
    engine.push(1, EV_GPU, 1, lambda _: order.append("g1b"))
    engine.advance()
    assert order == ["g1a", "g1b", "g2"]


def test_scheduling_in_the_past_faults():
    engine = EventQueue()
    engine.push(10, EV_GPU, 0, lambda _: None)
    engine.advance()
    with pytest.raises(InternalFault):
        engine.push(9, EV_GPU, 0, lambda _: None)


def test_advance_on_empty_queue_returns_zero():
    engine = EventQueue()
    assert engine.advance() == 0
