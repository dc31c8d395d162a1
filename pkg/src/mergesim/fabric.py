"""Switch-fabric primitives: packets, links, virtual channels, event engine.

The fabric is a single-hop all-to-all topology: every GPU has one
bidirectional link to every switch.  Packets are flit-quantized
(16 B flits, one header flit, payload capped at one 128 B burst) and
links are store-and-forward: a packet arrives at

    t_arrive = t_start + ceil(total_bytes / bandwidth) + latency

with integer-nanosecond timestamps throughout.  Time never goes
backwards; scheduling an event in the past is an internal fault.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

from .errors import InternalFault

FLIT_BYTES = 16
MAX_PAYLOAD_BYTES = 128          # one coalesced burst
SECTOR_BYTES = 32                # coalescing granularity
N_VIRTUAL_CHANNELS = 8
VC_DEPTH_FLITS = 256


class PacketKind(IntEnum):
    LOAD_REQ = 0
    LOAD_RESP = 1
    RED_REQ = 2
    RED_ACK = 3
    SYNC_REQ = 4
    SYNC_RELEASE = 5
    THROTTLE_CTRL = 6


class VcClass(IntEnum):
    LOAD = 0
    REDUCTION = 1
    CONTROL = 2


_KIND_TO_CLASS = {
    PacketKind.LOAD_REQ: VcClass.LOAD,
    PacketKind.LOAD_RESP: VcClass.LOAD,
    PacketKind.RED_REQ: VcClass.REDUCTION,
    PacketKind.RED_ACK: VcClass.REDUCTION,
    PacketKind.SYNC_REQ: VcClass.CONTROL,
    PacketKind.SYNC_RELEASE: VcClass.CONTROL,
    PacketKind.THROTTLE_CTRL: VcClass.CONTROL,
}

# Channel assignment.  Control traffic always rides its own channel so a
# release or throttle packet can never sit behind a data burst.  Load and
# reduction traffic get separate channels only when class separation is
# enabled (the top execution tier); otherwise they share channel 0.
_CONTROL_CHANNEL = 7


def vc_class_of(kind: int) -> int:
    return _KIND_TO_CLASS[kind]


def channel_for(cls: int, class_separation: bool) -> int:
    if cls == VcClass.CONTROL:
        return _CONTROL_CHANNEL
    if not class_separation:
        return 0
    return 0 if cls == VcClass.LOAD else 1


def packet_flits(payload_bytes: int) -> int:
    """Header flit plus payload flits; payload is capped at one burst."""
    if payload_bytes < 0 or payload_bytes > MAX_PAYLOAD_BYTES:
        raise InternalFault(f"payload {payload_bytes} outside [0, {MAX_PAYLOAD_BYTES}]")
    return 1 + (payload_bytes + FLIT_BYTES - 1) // FLIT_BYTES


def route_switch(addr: int, n_switches: int, interleave_bytes: int = 256) -> int:
    """Deterministic address-interleaved switch selection.

    Every GPU computes the same switch for the same address, which is what
    lets requests from different GPUs converge on one merge table.
    """
    return (addr // interleave_bytes) % n_switches


class Packet:
    """One fabric packet.  ``target_gpu`` is the GPU the switch forwards to
    (home GPU for requests, requester for responses/control); ``requester``
    survives merging so an evicted session's response can still be routed."""

    __slots__ = (
        "kind", "cls", "vc", "src_gpu", "target_gpu", "addr", "payload",
        "flits", "mergeable", "bypass", "requester", "tb_uid", "group",
        "phase", "merged_count", "contributors", "value", "created_ns",
        "req_bytes",
    )

    def __init__(self, kind: int, src_gpu: int, target_gpu: int, addr: int = 0,
                 payload: int = 0, *, vc: int = 0, mergeable: bool = False,
                 bypass: bool = False, requester: int = -1, tb_uid: int = -1,
                 group: int = -1, phase: int = -1, merged_count: int = 1,
                 contributors: tuple = (), value=None, created_ns: int = 0,
                 req_bytes: int = 0):
        self.kind = kind
        self.cls = _KIND_TO_CLASS[kind]
        self.vc = vc
        self.src_gpu = src_gpu
        self.target_gpu = target_gpu
        self.addr = addr
        self.payload = payload
        self.flits = packet_flits(payload)
        self.mergeable = mergeable
        self.bypass = bypass
        self.requester = requester
        self.tb_uid = tb_uid
        self.group = group
        self.phase = phase
        self.merged_count = merged_count
        self.contributors = contributors
        self.value = value
        self.created_ns = created_ns
        self.req_bytes = req_bytes

    def __repr__(self):  # pragma: no cover - debugging aid
        return (f"Packet({PacketKind(self.kind).name}, src={self.src_gpu}, "
                f"tgt={self.target_gpu}, addr={self.addr:#x}, pay={self.payload})")


@dataclass(frozen=True)
class Topology:
    """All-to-all GPU/switch wiring with uniform link parameters.

    ``bandwidth_bytes_per_us`` is per link per direction.  The default
    experiment configs split a GPU's aggregate injection bandwidth evenly
    across its switch links.
    """

    n_gpus: int
    n_switches: int
    bandwidth_bytes_per_us: int
    latency_ns: int
    interleave_bytes: int = 256

    def links(self) -> list[tuple[int, int, str]]:
        out = []
        for g in range(self.n_gpus):
            for s in range(self.n_switches):
                out.append((g, s, "up"))
                out.append((g, s, "down"))
        return out

    def route(self, addr: int) -> int:
        return route_switch(addr, self.n_switches, self.interleave_bytes)


def round_robin_pick(occupied, last: int) -> Optional[int]:
    """Next occupied slot strictly after ``last`` (wrapping), else None."""
    n = len(occupied)
    for i in range(1, n + 1):
        idx = (last + i) % n
        if occupied[idx]:
            return idx
    return None


class VcQueues:
    """Per-port virtual channels: n FIFOs with flit-occupancy counters.

    ``depth_flits=None`` means unbounded (used for egress staging, where
    the GPU- or switch-side backlog is allowed to grow)."""

    __slots__ = ("queues", "occupancy", "depth", "high_water")

    def __init__(self, n: int = N_VIRTUAL_CHANNELS, depth_flits: Optional[int] = VC_DEPTH_FLITS):
        self.queues: list[deque[Packet]] = [deque() for _ in range(n)]
        self.occupancy = [0] * n
        self.depth = depth_flits
        self.high_water = 0

    def can_accept(self, vc: int, flits: int) -> bool:
        return self.depth is None or self.occupancy[vc] + flits <= self.depth

    def push(self, pkt: Packet) -> bool:
        vc = pkt.vc
        if not self.can_accept(vc, pkt.flits):
            return False
        self.queues[vc].append(pkt)
        occ = self.occupancy[vc] + pkt.flits
        self.occupancy[vc] = occ
        if occ > self.high_water:
            self.high_water = occ
        return True

    def pop(self, vc: int) -> Packet:
        pkt = self.queues[vc].popleft()
        self.occupancy[vc] -= pkt.flits
        return pkt

    def head(self, vc: int) -> Optional[Packet]:
        q = self.queues[vc]
        return q[0] if q else None

    def arbitrate(self, last: int) -> Optional[int]:
        return round_robin_pick([bool(q) for q in self.queues], last)

    @property
    def total_packets(self) -> int:
        return sum(len(q) for q in self.queues)


# Event-kind ranks; ties at one timestamp dispatch in this order, then by
# actor id, then by push sequence.  The ordering is arbitrary but frozen —
# determinism is the requirement, not any particular rank.
EV_ARRIVE = 0
EV_LINK_FREE = 1
EV_SWITCH = 2
EV_GPU = 3
EV_SCAN = 4


class EventQueue:
    """Integer-ns event heap with deterministic tie-breaking."""

    __slots__ = ("_heap", "_seq", "now", "dispatched")

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0
        self.dispatched = 0

    def push(self, t: int, kind: int, actor: int, fn: Callable, arg=None) -> None:
        if t < self.now:
            raise InternalFault(
                f"event scheduled in the past: t={t} < now={self.now} (kind={kind}, actor={actor})")
        self._seq += 1
        heapq.heappush(self._heap, (t, kind, actor, self._seq, fn, arg))

    @property
    def pending(self) -> int:
        return len(self._heap)

    def advance(self) -> int:
        """Dispatch every event at the earliest pending timestamp.

        Returns the number of events dispatched (0 when the queue is empty,
        which terminates the run; end time is the last dispatched event)."""
        heap = self._heap
        if not heap:
            return 0
        t = heap[0][0]
        self.now = t
        n = 0
        while heap and heap[0][0] == t:
            _, _, _, _, fn, arg = heapq.heappop(heap)
            fn(arg)
            n += 1
        self.dispatched += n
        return n


class Link:
    """One directed link: per-VC egress staging, a serializer, and the
    receiver-side input buffer.

    The receiver drains its input buffer at line rate, so input occupancy
    can never build beyond the packet being delivered; the bounded-depth
    check is still enforced on every arrival.  Contention lives at the
    egress queues, where round-robin arbitration across occupied channels
    picks the next packet to serialize.
    """

    __slots__ = (
        "link_id", "up", "gpu", "switch", "engine", "deliver",
        "bw", "latency", "egress", "input_buf", "rr", "busy", "sink",
        "flits_injected", "flits_delivered",
    )

    def __init__(self, link_id: int, gpu: int, switch: int, up: bool,
                 bandwidth_bytes_per_us: int, latency_ns: int,
                 engine: EventQueue, deliver: Callable, sink=None):
        self.link_id = link_id
        self.gpu = gpu
        self.switch = switch
        self.up = up
        self.engine = engine
        self.deliver = deliver
        self.bw = bandwidth_bytes_per_us
        self.latency = latency_ns
        self.egress = VcQueues(depth_flits=None)
        self.input_buf = VcQueues(depth_flits=VC_DEPTH_FLITS)
        self.rr = N_VIRTUAL_CHANNELS - 1
        self.busy = False
        self.sink = sink
        self.flits_injected = 0
        self.flits_delivered = 0

    def serialization_ns(self, flits: int) -> int:
        bytes_total = flits * FLIT_BYTES
        return (bytes_total * 1000 + self.bw - 1) // self.bw

    def send(self, pkt: Packet) -> None:
        self.egress.push(pkt)   # unbounded: always accepted
        if not self.busy:
            self._start_next(self.engine.now)

    def _start_next(self, now: int) -> None:
        # Round-robin across occupied egress channels, skipping channels
        # whose head cannot fit in the receiver's buffer (back-pressure:
        # the packet waits, it is never dropped).
        egress = self.egress
        pick = None
        n = N_VIRTUAL_CHANNELS
        for i in range(1, n + 1):
            vc = (self.rr + i) % n
            head = egress.head(vc)
            if head is not None and self.input_buf.can_accept(vc, head.flits):
                pick = vc
                break
        if pick is None:
            self.busy = False
            return
        pkt = egress.pop(pick)
        self.rr = pick
        ser = self.serialization_ns(pkt.flits)
        self.busy = True
        self.flits_injected += pkt.flits
        if self.sink is not None:
            self.sink.record_tx(self, pkt, now, ser)
        self.engine.push(now + ser, EV_LINK_FREE, self.link_id, self._on_free)
        self.engine.push(now + ser + self.latency, EV_ARRIVE, self.link_id,
                         self._on_arrive, pkt)

    def _on_free(self, _arg) -> None:
        self._start_next(self.engine.now)

    def _on_arrive(self, pkt: Packet) -> None:
        buf = self.input_buf
        if not buf.push(pkt):
            raise InternalFault(
                f"link {self.link_id}: input VC {pkt.vc} overflow "
                f"({buf.occupancy[pkt.vc]}+{pkt.flits} > {buf.depth} flits)")
        buf.pop(pkt.vc)          # line-rate drain straight into the receiver
        self.flits_delivered += pkt.flits
        self.deliver(pkt, self)
