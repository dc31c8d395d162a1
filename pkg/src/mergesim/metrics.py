"""Measurement sinks and artifact emitters.

Everything here is passive: sinks observe link transmissions, merge-table
deltas and sync-table releases, then render CSV traces and a summary JSON
whose bytes are a pure function of the run (keys sorted, no timestamps).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from typing import Callable, Iterable, Optional

from .fabric import FLIT_BYTES, PacketKind, VcClass

WINDOW_NS = 1000

UTILIZATION_COLUMNS = ("time_ns", "link_id", "direction", "utilization")
OCCUPANCY_COLUMNS = ("time_ns", "switch", "port_gpu", "live_sessions")
SPREAD_COLUMNS = ("addr", "kind", "first_ns", "last_ns", "spread_ns", "requesters")
GROUP_TIMELINE_COLUMNS = ("group", "phase", "first_register_ns", "last_register_ns",
                          "release_ns")
PACKET_TRACE_COLUMNS = ("time_ns", "link_id", "direction", "kind", "src",
                        "dst", "addr", "group", "phase", "payload_bytes",
                        "flits")


class TrafficCounters:
    """Per-link, per-direction, per-VC-class byte and busy-time accounting.

    Registered as a link sink; ``record_tx`` fires once per packet at the
    moment its serialization starts and splits the busy interval across
    1 us windows so the utilization trace is exact.
    """

    def __init__(self, window_ns: int = WINDOW_NS, trace_links: frozenset = frozenset()):
        self.window_ns = window_ns
        # (link_id, up, cls) -> [payload, wire, packets, busy_ns]
        self.agg: dict[tuple[int, bool, int], list[int]] = {}
        # (link_id, up) -> {window_index: busy_ns}
        self.win_busy: dict[tuple[int, bool], dict[int, int]] = {}
        self.kind_packets: dict[int, int] = {}
        self.last_activity_ns = 0
        self.trace_links = trace_links
        self.trace: list[tuple] = []

    def record_tx(self, link, pkt, now: int, ser_ns: int) -> None:
        key = (link.link_id, link.up, int(pkt.cls))
        row = self.agg.get(key)
        if row is None:
            row = self.agg[key] = [0, 0, 0, 0]
        row[0] += pkt.payload
        row[1] += pkt.flits * FLIT_BYTES
        row[2] += 1
        row[3] += ser_ns
        self.kind_packets[int(pkt.kind)] = self.kind_packets.get(int(pkt.kind), 0) + 1
        self.last_activity_ns = max(self.last_activity_ns, now + ser_ns)
        if link.link_id in self.trace_links:
            self.trace.append((now, link.link_id, "up" if link.up else "down",
                               PacketKind(pkt.kind).name, pkt.src_gpu,
                               pkt.target_gpu, pkt.addr, pkt.group, pkt.phase,
                               pkt.payload, pkt.flits))

        wins = self.win_busy.setdefault((link.link_id, link.up), {})
        t, end = now, now + ser_ns
        while t < end:
            widx = t // self.window_ns
            wend = (widx + 1) * self.window_ns
            step = min(end, wend) - t
            wins[widx] = wins.get(widx, 0) + step
            t += step
        if ser_ns == 0:
            wins.setdefault(now // self.window_ns, 0)

    # -- aggregate queries ---------------------------------------------------

    def payload_bytes(self, up: Optional[bool] = None,
                      cls: Optional[int] = None) -> int:
        return sum(row[0] for (_, u, c), row in self.agg.items()
                   if (up is None or u == up) and (cls is None or c == cls))

    def wire_bytes(self, up: Optional[bool] = None) -> int:
        return sum(row[1] for (_, u, _), row in self.agg.items()
                   if up is None or u == up)

    def busy_ns_by_link(self) -> dict[tuple[int, bool], int]:
        out: dict[tuple[int, bool], int] = {}
        for (lid, up, _), row in self.agg.items():
            out[(lid, up)] = out.get((lid, up), 0) + row[3]
        return out

    def mean_utilization(self, makespan_ns: int,
                         up: Optional[bool] = None) -> float:
        if makespan_ns <= 0:
            return 0.0
        busy = self.busy_ns_by_link()
        vals = [b / makespan_ns for (_, u), b in busy.items()
                if up is None or u == up]
        return sum(vals) / len(vals) if vals else 0.0

    def steady_utilization(self, makespan_ns: int, lo: float = 0.25,
                           hi: float = 0.75,
                           up: Optional[bool] = None) -> float:
        """Mean per-window utilization over the middle of the run.

        The inclusive mean dilutes sustained behaviour with launch ramp and
        drain, during which no scheduling policy can keep links busy.  This
        variant keeps only whole windows whose start falls inside
        ``[lo, hi) * makespan`` (middle half by default) and averages across
        every link/direction pair seen during the run, counting pairs with no
        traffic in a kept window as zero.
        """
        if makespan_ns <= 0:
            return 0.0
        w = self.window_ns
        i_lo = math.ceil(lo * makespan_ns / w)
        i_hi = math.ceil(hi * makespan_ns / w) - 1
        pairs = [k for k in self.win_busy if up is None or k[1] == up]
        if i_hi < i_lo or not pairs:
            return 0.0
        total = sum(busy for key in pairs
                    for widx, busy in self.win_busy[key].items()
                    if i_lo <= widx <= i_hi)
        return total / (w * (i_hi - i_lo + 1) * len(pairs))

    def direction_summary(self) -> dict:
        out: dict[str, dict] = {}
        for (_, up, c), row in sorted(self.agg.items()):
            d = out.setdefault("up" if up else "down", {})
            cls_name = VcClass(c).name.lower()
            slot = d.setdefault(cls_name, {"payload_bytes": 0, "wire_bytes": 0,
                                           "packets": 0, "busy_ns": 0})
            slot["payload_bytes"] += row[0]
            slot["wire_bytes"] += row[1]
            slot["packets"] += row[2]
            slot["busy_ns"] += row[3]
        return out

    def window_rows(self) -> Iterable[tuple[int, int, str, float]]:
        for (lid, up), wins in sorted(self.win_busy.items()):
            direction = "up" if up else "down"
            for widx in sorted(wins):
                yield (widx * self.window_ns, lid, direction,
                       wins[widx] / self.window_ns)


class WaitStats:
    """Arrival spread of mergeable requests per (128 B burst, kind).

    Spread = latest - earliest first-arrival among the requesting GPUs;
    only addresses with at least two requesters count.
    """

    def __init__(self):
        # (addr, is_reduction) -> [first_ns, last_ns, count]
        self._acc: dict[tuple[int, bool], list[int]] = {}

    def record(self, addr: int, is_reduction: bool, now: int) -> None:
        key = (addr, is_reduction)
        row = self._acc.get(key)
        if row is None:
            self._acc[key] = [now, now, 1]
        else:
            if now < row[0]:
                row[0] = now
            if now > row[1]:
                row[1] = now
            row[2] += 1

    def rows(self) -> Iterable[tuple[int, str, int, int, int, int]]:
        for (addr, red), (first, last, n) in sorted(self._acc.items()):
            if n >= 2:
                kind = "reduction" if red else "load"
                yield (addr, kind, first, last, last - first, n)

    def summary(self) -> dict:
        spreads = [last - first for (first, last, n) in self._acc.values() if n >= 2]
        if not spreads:
            return {"addresses": 0, "mean_ns": 0.0, "max_ns": 0, "min_ns": 0}
        return {"addresses": len(spreads),
                "mean_ns": sum(spreads) / len(spreads),
                "max_ns": max(spreads), "min_ns": min(spreads)}


class OccupancySampler:
    """Last-in-window live-session level per merge table."""

    def __init__(self, window_ns: int = WINDOW_NS):
        self.window_ns = window_ns
        self._last: dict[tuple[int, int, int], int] = {}   # (widx, switch, gpu)
        self.peak = 0

    def note(self, now: int, switch: int, port_gpu: int, live: int) -> None:
        self._last[(now // self.window_ns, switch, port_gpu)] = live
        if live > self.peak:
            self.peak = live

    def rows(self) -> Iterable[tuple[int, int, int, int]]:
        for (widx, sw, g), live in sorted(self._last.items()):
            yield (widx * self.window_ns, sw, g, live)


class EventLogHash:
    """Order-sensitive digest of simulation events for determinism checks."""

    def __init__(self):
        self._h = hashlib.sha256()
        self.n_records = 0

    def add(self, *fields) -> None:
        self._h.update("|".join(str(f) for f in fields).encode())
        self._h.update(b"\n")
        self.n_records += 1

    def hexdigest(self) -> str:
        return self._h.hexdigest()


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(rows)


def write_utilization_csv(path, counters: TrafficCounters) -> None:
    _write_csv(path, UTILIZATION_COLUMNS,
               ((t, lid, d, f"{u:.6f}") for t, lid, d, u in counters.window_rows()))


def write_occupancy_csv(path, sampler: OccupancySampler) -> None:
    _write_csv(path, OCCUPANCY_COLUMNS, sampler.rows())


def write_spreads_csv(path, waits: WaitStats) -> None:
    _write_csv(path, SPREAD_COLUMNS, waits.rows())


def write_group_timeline_csv(path, timeline: dict) -> None:
    rows = [(gid, phase, t0, t1, tr)
            for (gid, phase), (t0, t1, tr) in sorted(timeline.items())]
    _write_csv(path, GROUP_TIMELINE_COLUMNS, rows)


def write_packet_trace_csv(path, counters: TrafficCounters) -> None:
    _write_csv(path, PACKET_TRACE_COLUMNS, counters.trace)


def dump_summary(path, summary: dict) -> None:
    """Byte-stable JSON: sorted keys, fixed separators, trailing newline."""
    with open(path, "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2))
        fh.write("\n")


def min_table_search(fully_merged: Callable[[int], bool], lo: int = 1,
                     hi: int = 320) -> Optional[int]:
    """Smallest per-port entry count for which ``fully_merged`` holds.

    Assumes monotonicity in table size (more entries never hurt, which
    holds because eviction only triggers on a full table).  Returns None
    when even ``hi`` entries cannot absorb the workload.
    """
    if not fully_merged(hi):
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if fully_merged(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo
