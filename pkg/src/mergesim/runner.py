"""Simulation engine: GPUs, switches and links wired into one event loop.

The run is fully deterministic: integer-ns timestamps, a tie-broken event
heap, insertion-ordered containers and seeded RNGs.  Two runs with the
same config and workload produce byte-identical summaries.

Thread-block lifecycle (full feature tier):

    deps complete -> [pre-launch sync] -> queued -> SM slot -> [jitter]
        -> [pre-access sync] -> loads issued + compute
        -> compute done -> reductions issued, slot freed
        -> all reduction writes landed at home -> dataflow-complete

Bracketed stages drop out at lower tiers.  Queued TBs dispatch in global
release order (the sync release timestamp, identical on every GPU), which
keeps dispatch sequences aligned across GPUs and makes the rendezvous in
the pre-access phase deadlock-free.
"""

from __future__ import annotations

import heapq
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coordination import (PHASE_PREACCESS, PHASE_PRELAUNCH, GpuSynchronizer,
                           GroupSyncTable, ThrottleConfig, ThrottleController,
                           group_tbs, sync_home_switch)
from .dataflow import DependencyTracker, build_tb_dag, partition_sms
from .errors import ConfigError, InternalFault
from .fabric import (EV_GPU, EV_SCAN, EventQueue, Link, Packet, PacketKind,
                     VcClass, channel_for)
from .gpu_model import (AddressPattern, ComputeConfig, HomeMemory, MemOp,
                        ThrottleGate, tb_compute_ns)
from .merge_unit import (A_FETCH, A_FORWARD_RED, A_RESPOND, A_WRITEBACK,
                         MergeTable, MergeTableConfig)
from .metrics import (EventLogHash, OccupancySampler, TrafficCounters,
                      WaitStats, dump_summary, write_group_timeline_csv,
                      write_occupancy_csv, write_packet_trace_csv,
                      write_spreads_csv, write_utilization_csv)
from .workloads import ExecMode, Workload

AGGREGATE_BW_BYTES_PER_US = 450_000      # 450 GB/s per GPU per direction


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    n_gpus: int = 8
    n_switches: int = 4
    mode: ExecMode = ExecMode.FULL
    link_bandwidth_bytes_per_us: int = 0     # 0 -> aggregate split across switches
    link_latency_ns: int = 250
    interleave_bytes: int = 256
    merge_enabled: bool = True
    entries_per_port: int = 320
    merge_timeout_ns: int = 10_000
    lead_threshold: int = 8
    compute: ComputeConfig = field(default_factory=ComputeConfig)
    track_values: bool = False
    value_dtype: str = "int64"               # "int64" | "float64"
    value_width: int = 4                     # accumulator elements per burst
    seed: int = 0
    hash_events: bool = False
    trace_link_ids: tuple[int, ...] = ()
    max_events: int = 500_000_000
    sim_time_limit_ns: int = 0               # 0 -> unlimited

    def resolved_bandwidth(self) -> int:
        if self.link_bandwidth_bytes_per_us:
            return self.link_bandwidth_bytes_per_us
        return max(1, AGGREGATE_BW_BYTES_PER_US // self.n_switches)

    def validate(self) -> None:
        if self.n_gpus < 2:
            raise ConfigError("n_gpus", f"need at least 2 GPUs, got {self.n_gpus}")
        if self.n_switches < 1:
            raise ConfigError("n_switches", f"need at least 1 switch, got {self.n_switches}")
        if self.resolved_bandwidth() < 1:
            raise ConfigError("link_bandwidth_bytes_per_us",
                              "resolved bandwidth must be positive")
        if self.link_latency_ns < 0:
            raise ConfigError("link_latency_ns", "latency cannot be negative")
        if self.interleave_bytes < 128 or self.interleave_bytes % 128:
            raise ConfigError("interleave_bytes",
                              "must be a multiple of 128 so a burst never "
                              "splits across switches")
        if self.entries_per_port < 1:
            raise ConfigError("entries_per_port", "must be >= 1")
        if self.merge_timeout_ns < 1:
            raise ConfigError("merge_timeout_ns", "must be >= 1")
        if self.lead_threshold < 1:
            raise ConfigError("lead_threshold", "must be >= 1")
        if self.value_dtype not in ("int64", "float64"):
            raise ConfigError("value_dtype", f"unknown dtype '{self.value_dtype}'")
        if self.value_width < 1:
            raise ConfigError("value_width", "must be >= 1")
        if self.max_events < 1000:
            raise ConfigError("max_events", "must be >= 1000")
        try:
            self.compute.validate()
        except ValueError as e:
            raise ConfigError("compute", str(e)) from None
        if not isinstance(self.mode, ExecMode):
            raise ConfigError("mode", f"unknown execution mode {self.mode!r}")


# Thread-block runtime states.
S_WAIT = 0          # dependencies outstanding
S_PRELAUNCH = 1     # registered for pre-launch sync
S_QUEUED = 2        # dispatchable, waiting for an SM slot
S_PREACCESS = 3     # on an SM, registered for pre-access sync
S_RUN = 4           # loads in flight / computing
S_DRAIN = 5         # compute done, reduction writes not yet landed
S_DONE = 6


class _TB:
    __slots__ = ("uid", "gpu", "kernel_id", "block", "gid", "pool",
                 "compute_ns", "extra_ns", "mem_ops", "state",
                 "pending_loads", "pending_reds", "t_data", "base_end",
                 "compute_done", "end_scheduled")

    def __init__(self, uid, gpu, kernel_id, block, gid, pool, compute_ns,
                 extra_ns, mem_ops):
        self.uid = uid
        self.gpu = gpu
        self.kernel_id = kernel_id
        self.block = block
        self.gid = gid
        self.pool = pool
        self.compute_ns = compute_ns
        self.extra_ns = extra_ns
        self.mem_ops = mem_ops
        self.state = S_WAIT
        self.pending_loads = 0
        self.pending_reds = 0
        self.t_data = -1
        self.base_end = -1
        self.compute_done = False
        self.end_scheduled = False


_UNGROUPED_TIEBREAK = 1 << 40


class GpuRuntime:
    """One GPU: SM slots, dispatch queues, memory and the NIC side."""

    def __init__(self, sim: "Simulation", gpu: int):
        self.sim = sim
        self.gpu = gpu
        cfg = sim.cfg
        self.free_slots = cfg.compute.total_slots
        n_classes = len(sim.class_quota) if sim.class_quota else 1
        self.queues: list[list] = [[] for _ in range(n_classes)]
        self.running = [0] * n_classes
        self._kick_pending = False
        self.sync = GpuSynchronizer(gpu)
        self.gate = ThrottleGate(cfg.n_switches) if sim.features.coordination else None
        self.memory = HomeMemory(gpu, cfg.track_values)
        self.rng = random.Random((cfg.seed * 1_000_003) ^ (gpu + 1))
        self.offset_ns = sim.skew_offsets[gpu]
        # Issue counters (conservation checks).
        self.red_remote_issued = 0
        self.red_local_applied = 0
        self.loads_issued = 0
        self.loads_satisfied = 0
        self.sync_reqs_sent = 0
        self.sync_releases_seen = 0
        self.max_load_latency_ns = 0
        self.max_red_latency_ns = 0
        self._load_issued_at: dict[tuple[int, int], int] = {}
        self._red_issued_at: dict[tuple[int, int], int] = {}
        # Remote-request credits: the memory system allows only so many
        # un-answered lines in each direction; the rest wait here in issue
        # order.  Loads recycle on data responses, stores on switch acks.
        self.load_credits = cfg.compute.max_outstanding_loads
        self._load_backlog: deque[Packet] = deque()
        self.store_credits = cfg.compute.max_outstanding_stores
        self._red_backlog: deque[Packet] = deque()

    # ---- scheduling -------------------------------------------------------

    def on_ready(self, uid: int) -> None:
        """Dependency tracker released this TB."""
        tb = self.sim.tbs[uid]
        now = self.sim.engine.now
        if self.sim.features.coordination and tb.gid >= 0:
            tb.state = S_PRELAUNCH
            self._send_sync(tb, PHASE_PRELAUNCH)
        else:
            self._enqueue(tb, now, _UNGROUPED_TIEBREAK + uid)

    def _enqueue(self, tb: _TB, order_ns: int, tiebreak: int) -> None:
        tb.state = S_QUEUED
        heapq.heappush(self.queues[tb.pool], (order_ns, tiebreak, tb.uid))
        self._kick()

    def _kick(self) -> None:
        if not self._kick_pending:
            self._kick_pending = True
            t = max(self.sim.engine.now, self.offset_ns)
            self.sim.engine.push(t, EV_GPU, self.gpu, self._dispatch, None)

    def _eligible(self, cls: int) -> bool:
        """Class quotas bind only under contention: a class is capped at its
        share while the other class has demand and otherwise gets the whole
        machine (a sole ready kernel uses every SM)."""
        quota = self.sim.class_quota
        if quota is None or len(self.queues) == 1:
            return True
        other = 1 - cls
        if self.queues[other] or self.running[other]:
            return self.running[cls] < quota[cls]
        return True

    def _dispatch(self, _arg) -> None:
        self._kick_pending = False
        while self.free_slots > 0:
            best = None
            for cls, q in enumerate(self.queues):
                if q and self._eligible(cls) and (best is None or q[0] < self.queues[best][0]):
                    best = cls
            if best is None:
                return
            _, _, uid = heapq.heappop(self.queues[best])
            self.free_slots -= 1
            self.running[best] += 1
            self._start_tb(uid)

    def _start_tb(self, uid: int) -> None:
        tb = self.sim.tbs[uid]
        now = self.sim.engine.now
        jitter = self.rng.randint(0, self.sim.cfg.compute.tb_jitter_ns) \
            if self.sim.cfg.compute.tb_jitter_ns else 0
        if jitter:
            self.sim.engine.push(now + jitter, EV_GPU, self.gpu,
                                 self._tb_started, uid)
        else:
            self._tb_started(uid)

    def _tb_started(self, uid: int) -> None:
        tb = self.sim.tbs[uid]
        if self.sim.features.coordination and tb.gid >= 0:
            tb.state = S_PREACCESS
            if self.gate.active:
                # Hold the whole TB at the pre-access boundary while any
                # switch has this GPU throttled.  TBs already past this point
                # keep draining, so open sessions always complete and the
                # gate reopens.
                self.gate.park(uid)
            else:
                self._send_sync(tb, PHASE_PREACCESS)
        else:
            self._begin_access(tb)

    def _begin_access(self, tb: _TB) -> None:
        now = self.sim.engine.now
        tb.state = S_RUN
        self._issue_loads(tb, now)
        if self.sim.cfg.compute.reduction_issue == "start":
            self._issue_reductions(tb, now)
        tb.base_end = now + tb.compute_ns
        if tb.pending_loads == 0:
            self._schedule_end(tb, tb.base_end)

    def _schedule_end(self, tb: _TB, t: int) -> None:
        if tb.end_scheduled:
            raise InternalFault(f"TB {tb.uid}: compute end scheduled twice")
        tb.end_scheduled = True
        self.sim.engine.push(t, EV_GPU, self.gpu, self._compute_done, tb.uid)

    def _compute_done(self, uid: int) -> None:
        tb = self.sim.tbs[uid]
        now = self.sim.engine.now
        tb.compute_done = True
        if self.sim.cfg.compute.reduction_issue == "end":
            self._issue_reductions(tb, now)
        # Slot frees once the last memory op is handed to the NIC; the TB
        # may still be draining reduction writes.
        self.free_slots += 1
        self.running[tb.pool] -= 1
        if self.free_slots > self.sim.cfg.compute.total_slots or self.running[tb.pool] < 0:
            raise InternalFault(f"gpu {self.gpu}: slot bookkeeping underflow")
        self._kick()
        if tb.pending_reds == 0:
            self.sim.finish_tb(tb)
        else:
            tb.state = S_DRAIN

    # ---- memory-op issue --------------------------------------------------

    def _issue_loads(self, tb: _TB, now: int) -> None:
        vc = channel_for(VcClass.LOAD, self.sim.features.vc_classes)
        for op in tb.mem_ops:
            if op.is_reduction:
                continue
            for addr, nbytes in op.pattern.bursts():
                home = self.sim.amap.owner(addr)
                if home == self.gpu:
                    continue            # local shard: no fabric traffic
                tb.pending_loads += 1
                self.loads_issued += 1
                pkt = Packet(PacketKind.LOAD_REQ, self.gpu, home, addr, 0,
                             vc=vc, mergeable=op.mergeable, requester=self.gpu,
                             tb_uid=tb.uid, group=tb.gid, created_ns=now,
                             req_bytes=nbytes)
                self._send_load(pkt)

    def _issue_reductions(self, tb: _TB, now: int) -> None:
        vc = channel_for(VcClass.REDUCTION, self.sim.features.vc_classes)
        track = self.sim.cfg.track_values
        for op in tb.mem_ops:
            if not op.is_reduction:
                continue
            for addr, nbytes in op.pattern.bursts():
                home = self.sim.amap.owner(addr)
                value = self.sim.red_value(addr, self.gpu) if track else None
                if home == self.gpu:
                    self.memory.apply_reduction(addr, 1, value)
                    self.red_local_applied += 1
                    continue
                tb.pending_reds += 1
                self.red_remote_issued += 1
                pkt = Packet(PacketKind.RED_REQ, self.gpu, home, addr, nbytes,
                             vc=vc, mergeable=op.mergeable, requester=self.gpu,
                             tb_uid=tb.uid, group=tb.gid, contributors=(tb.uid,),
                             value=value, created_ns=now)
                self._send_red(pkt)

    def _send_load(self, pkt: Packet) -> None:
        if self.load_credits > 0:
            self.load_credits -= 1
            pkt.created_ns = self.sim.engine.now
            self._load_issued_at[(pkt.addr, pkt.tb_uid)] = pkt.created_ns
            self._send_data(pkt)
        else:
            self._load_backlog.append(pkt)

    def _send_red(self, pkt: Packet) -> None:
        if self.store_credits > 0:
            self.store_credits -= 1
            pkt.created_ns = self.sim.engine.now
            self._red_issued_at[(pkt.addr, pkt.tb_uid)] = pkt.created_ns
            self._send_data(pkt)
        else:
            self._red_backlog.append(pkt)

    def _send_data(self, pkt: Packet) -> None:
        self.sim.send_up(self.gpu, self.sim.topo_route(pkt.addr), pkt)

    def _send_sync(self, tb: _TB, phase: int) -> None:
        switch = sync_home_switch(tb.gid, self.sim.cfg.n_switches)
        self.sync.park(tb.gid, phase, tb.uid)
        self.sync_reqs_sent += 1
        pkt = Packet(PacketKind.SYNC_REQ, self.gpu, -1, vc=channel_for(
            VcClass.CONTROL, True), group=tb.gid, phase=phase,
            created_ns=self.sim.engine.now)
        self.sim.send_up(self.gpu, switch, pkt)

    # ---- inbound ----------------------------------------------------------

    def on_packet(self, pkt: Packet, link: Link) -> None:
        kind = pkt.kind
        if kind == PacketKind.LOAD_RESP:
            self._on_load_response(pkt)
        elif kind == PacketKind.RED_REQ:
            self._on_reduction_arrival(pkt)
        elif kind == PacketKind.LOAD_REQ:
            self._on_home_fetch(pkt, link)
        elif kind == PacketKind.RED_ACK:
            self._on_red_ack()
        elif kind == PacketKind.SYNC_RELEASE:
            self._on_sync_release(pkt)
        elif kind == PacketKind.THROTTLE_CTRL:
            self._on_throttle(pkt, link)
        else:
            raise InternalFault(f"gpu {self.gpu}: unexpected packet kind {kind}")

    def _on_red_ack(self) -> None:
        self.store_credits += 1
        if self._red_backlog:
            self.store_credits -= 1
            nxt = self._red_backlog.popleft()
            nxt.created_ns = self.sim.engine.now
            self._red_issued_at[(nxt.addr, nxt.tb_uid)] = nxt.created_ns
            self._send_data(nxt)

    def _on_load_response(self, pkt: Packet) -> None:
        tb = self.sim.tbs[pkt.tb_uid]
        if tb.gpu != self.gpu:
            raise InternalFault(
                f"load response for TB {pkt.tb_uid} delivered to gpu {self.gpu}")
        now = self.sim.engine.now
        self.loads_satisfied += 1
        issued = self._load_issued_at.pop((pkt.addr, pkt.tb_uid), None)
        if issued is not None:
            self.max_load_latency_ns = max(self.max_load_latency_ns, now - issued)
        self.load_credits += 1
        if self._load_backlog:
            self.load_credits -= 1
            nxt = self._load_backlog.popleft()
            nxt.created_ns = now
            self._load_issued_at[(nxt.addr, nxt.tb_uid)] = now
            self._send_data(nxt)
        if self.sim.cfg.track_values:
            self.sim.loads_delivered.setdefault(
                (pkt.addr, self.gpu), []).append(pkt.value)
        tb.pending_loads -= 1
        if tb.pending_loads < 0:
            raise InternalFault(f"TB {tb.uid}: more responses than requests")
        if tb.pending_loads == 0 and tb.state == S_RUN:
            tb.t_data = now
            self._schedule_end(tb, max(tb.base_end, now + tb.extra_ns))

    def _on_reduction_arrival(self, pkt: Packet) -> None:
        # Writeback (or unmerged forward) landing at the home GPU.
        self.memory.apply_reduction(pkt.addr, pkt.merged_count, pkt.value)
        now = self.sim.engine.now
        for uid in pkt.contributors:
            src = self.sim.gpus[self.sim.tbs[uid].gpu]
            t0 = src._red_issued_at.pop((pkt.addr, uid), None)
            if t0 is not None and now - t0 > src.max_red_latency_ns:
                src.max_red_latency_ns = now - t0
        self.sim.on_reductions_applied(pkt.contributors)

    def _on_home_fetch(self, pkt: Packet, link: Link) -> None:
        value = self.memory.read(pkt.addr)
        resp = Packet(PacketKind.LOAD_RESP, self.gpu, pkt.requester, pkt.addr,
                      pkt.req_bytes, vc=channel_for(VcClass.LOAD,
                                                    self.sim.features.vc_classes),
                      mergeable=pkt.mergeable, bypass=pkt.bypass,
                      requester=pkt.requester, tb_uid=pkt.tb_uid, value=value,
                      created_ns=self.sim.engine.now)
        self.sim.send_up(self.gpu, link.switch, resp)

    def _on_sync_release(self, pkt: Packet) -> None:
        uid = self.sync.on_release(pkt.group, pkt.phase)
        tb = self.sim.tbs[uid]
        self.sync_releases_seen += 1
        if pkt.phase == PHASE_PRELAUNCH:
            # Order by the switch-side release timestamp: it is the same on
            # every GPU, so dispatch sequences stay globally aligned.
            self._enqueue(tb, pkt.created_ns, tb.gid)
        else:
            self._begin_access(tb)

    def _on_throttle(self, pkt: Packet, link: Link) -> None:
        released = self.gate.set_state(link.switch, bool(pkt.phase))
        for uid in released:
            self._send_sync(self.sim.tbs[uid], PHASE_PREACCESS)


class SwitchRuntime:
    """One switch: merge tables per output port, sync table, throttling."""

    def __init__(self, sim: "Simulation", sid: int):
        self.sim = sim
        self.sid = sid
        cfg = sim.cfg
        self.sync_table = GroupSyncTable(sid)
        self.throttle = ThrottleController(
            ThrottleConfig(cfg.lead_threshold), cfg.n_gpus) \
            if sim.features.coordination else None
        self.tables: list[MergeTable] = []
        for home in range(cfg.n_gpus):
            table = MergeTable(sim.merge_cfg, home)
            table.on_delta = self._delta_hook(table, home)
            self.tables.append(table)
        self._scan_at: Optional[int] = None

    def _delta_hook(self, table: MergeTable, home: int):
        def hook(initiator: int, delta: int, group: int) -> None:
            self.sim.occupancy.note(self.sim.engine.now, self.sid, home,
                                    table.entries_used)
            if self.throttle is not None:
                edge = self.throttle.update(initiator, group, delta)
                if edge is not None:
                    pkt = Packet(PacketKind.THROTTLE_CTRL, -1, initiator,
                                 vc=channel_for(VcClass.CONTROL, True),
                                 phase=1 if edge else 0,
                                 created_ns=self.sim.engine.now)
                    self.sim.send_down(self.sid, initiator, pkt)
        return hook

    # ---- inbound ----------------------------------------------------------

    def on_packet(self, pkt: Packet, link: Link) -> None:
        kind = pkt.kind
        if kind == PacketKind.LOAD_REQ:
            self._on_load_req(pkt)
        elif kind == PacketKind.LOAD_RESP:
            self._on_load_resp(pkt)
        elif kind == PacketKind.RED_REQ:
            self._on_reduction(pkt)
        elif kind == PacketKind.SYNC_REQ:
            self._on_sync_req(pkt)
        else:
            raise InternalFault(f"switch {self.sid}: unexpected packet kind {kind}")

    def _on_load_req(self, pkt: Packet) -> None:
        now = self.sim.engine.now
        home = pkt.target_gpu
        if not pkt.mergeable:
            pkt.bypass = True           # no session: response will unicast
            self.sim.send_down(self.sid, home, pkt)
            return
        self.sim.waits.record(pkt.addr, False, now)
        table = self.tables[home]
        actions = table.handle_load(pkt.addr, pkt.req_bytes, pkt.src_gpu,
                                    pkt.tb_uid, now, group=pkt.group)
        self._apply_actions(table, actions, pkt.addr, home)
        self._reschedule_scan()

    def _on_load_resp(self, pkt: Packet) -> None:
        now = self.sim.engine.now
        if pkt.bypass:
            self.sim.send_down(self.sid, pkt.requester, pkt)
            return
        table = self.tables[pkt.src_gpu]
        actions = table.handle_load_response(
            pkt.addr, pkt.payload, pkt.value, now,
            fetched_for=(pkt.requester, pkt.tb_uid))
        if actions is None:
            # Session evicted (or superseded); deliver to the original
            # requester directly.
            self.sim.send_down(self.sid, pkt.requester, pkt)
            return
        self._apply_actions(table, actions, pkt.addr, pkt.src_gpu)
        self._reschedule_scan()

    def _on_reduction(self, pkt: Packet) -> None:
        now = self.sim.engine.now
        home = pkt.target_gpu
        # The sender's store slot recycles as soon as the switch owns the
        # write: a single-flit ack, the feedback that paces a GPU whose
        # reductions are draining slower than it produces them.
        ack = Packet(PacketKind.RED_ACK, -1, pkt.src_gpu, pkt.addr, 0,
                     vc=pkt.vc, created_ns=now)
        self.sim.send_down(self.sid, pkt.src_gpu, ack)
        if not pkt.mergeable:
            self.sim.send_down(self.sid, home, pkt)
            return
        self.sim.waits.record(pkt.addr, True, now)
        table = self.tables[home]
        actions = table.handle_reduction(pkt.addr, pkt.payload, pkt.src_gpu,
                                         pkt.tb_uid, pkt.value, now,
                                         group=pkt.group)
        self._apply_actions(table, actions, pkt.addr, home)
        self._reschedule_scan()

    def _on_sync_req(self, pkt: Packet) -> None:
        now = self.sim.engine.now
        members = self.sync_table.register(pkt.group, pkt.phase, pkt.src_gpu,
                                           self.sim.cfg.n_gpus, now)
        if members is None:
            return
        vc = channel_for(VcClass.CONTROL, True)
        for gpu in members:
            rel = Packet(PacketKind.SYNC_RELEASE, -1, gpu, vc=vc,
                         group=pkt.group, phase=pkt.phase, created_ns=now)
            self.sim.send_down(self.sid, gpu, rel)

    # ---- action execution --------------------------------------------------

    def _apply_actions(self, table: MergeTable, actions: list, addr: int,
                       home: int) -> None:
        now = self.sim.engine.now
        feats = self.sim.features
        for act in actions:
            op = act[0]
            if op == A_FETCH:
                _, gpu, tb_uid, bypass, req_bytes = act
                fetch = Packet(PacketKind.LOAD_REQ, gpu, home, addr, 0,
                               vc=channel_for(VcClass.LOAD, feats.vc_classes),
                               mergeable=not bypass, bypass=bypass,
                               requester=gpu, tb_uid=tb_uid, created_ns=now,
                               req_bytes=req_bytes)
                self.sim.send_down(self.sid, home, fetch)
            elif op == A_RESPOND:
                _, gpu, tb_uid, payload, value = act
                resp = Packet(PacketKind.LOAD_RESP, home, gpu, addr, payload,
                              vc=channel_for(VcClass.LOAD, feats.vc_classes),
                              requester=gpu, tb_uid=tb_uid, value=value,
                              created_ns=now)
                self.sim.send_down(self.sid, gpu, resp)
            elif op == A_WRITEBACK:
                # May flush an evicted session, so it names its own address.
                _, wb_addr, payload, count, contributors, value = act
                wb = Packet(PacketKind.RED_REQ, -1, home, wb_addr, payload,
                            vc=channel_for(VcClass.REDUCTION, feats.vc_classes),
                            merged_count=count, contributors=contributors,
                            value=value, created_ns=now)
                self.sim.send_down(self.sid, home, wb)
            elif op == A_FORWARD_RED:
                _, gpu, tb_uid, payload, value = act
                fwd = Packet(PacketKind.RED_REQ, gpu, home, addr, payload,
                             vc=channel_for(VcClass.REDUCTION, feats.vc_classes),
                             merged_count=1, contributors=(tb_uid,),
                             value=value, created_ns=now)
                self.sim.send_down(self.sid, home, fwd)
            else:
                raise InternalFault(f"unknown merge action {op}")

    # ---- timeout scanning ---------------------------------------------------

    def _reschedule_scan(self) -> None:
        deadlines = [d for d in (t.next_deadline() for t in self.tables)
                     if d is not None]
        if not deadlines:
            return
        d = max(min(deadlines), self.sim.engine.now)
        if self._scan_at is None or d < self._scan_at:
            self._scan_at = d
            self.sim.engine.push(d, EV_SCAN, self.sid, self._scan)

    def _scan(self, _arg) -> None:
        self._scan_at = None
        now = self.sim.engine.now
        for table in self.tables:
            for addr, act in table.tick_timeouts(now):
                self._apply_actions(table, [act], addr, table.home_gpu)
        self._reschedule_scan()


class RunResult:
    """Everything observable about one finished run."""

    def __init__(self, sim: "Simulation"):
        cfg = sim.cfg
        self.cfg = cfg
        self.workload_name = sim.wl.name
        self.makespan_ns = sim.last_completion_ns
        self.end_ns = sim.engine.now
        self.events = sim.engine.dispatched
        self.counters = sim.counters
        self.waits = sim.waits
        self.occupancy = sim.occupancy
        self.aborted = sim.aborted
        self.completed = sim.tracker.all_complete
        self.loads_delivered = sim.loads_delivered
        self.memories = [g.memory for g in sim.gpus]
        self.group_timeline: dict = {}
        for sw in sim.switches:
            self.group_timeline.update(sw.sync_table.timeline)
        self.event_log_sha256 = sim.ehash.hexdigest() if sim.ehash else None

        self.merge = self._merge_stats(sim)
        self.sync = self._sync_stats(sim)
        self.conservation = self._conservation(sim)
        self.flits_balanced = all(
            ln.flits_injected == ln.flits_delivered for ln in sim.all_links)
        self.vc_high_water = max(
            (ln.input_buf.high_water for ln in sim.all_links), default=0)

    @staticmethod
    def _merge_stats(sim: "Simulation") -> dict:
        tables = [t for sw in sim.switches for t in sw.tables]
        agg = {
            "hits": sum(t.hits for t in tables),
            "misses": sum(t.misses for t in tables),
            "bypasses": sum(t.bypasses for t in tables),
            "lru_evictions": sum(t.lru_evictions for t in tables),
            "timeout_evictions": sum(t.timeout_evictions for t in tables),
            "sessions_load": sum(t.sessions_load for t in tables),
            "sessions_red": sum(t.sessions_red for t in tables),
            "peak_entries_per_port": max((t.peak_entries for t in tables), default=0),
            "peak_bytes_per_port": max((t.peak_bytes for t in tables), default=0),
            "entries_left": sum(t.entries_used for t in tables),
            "enabled": sim.merge_cfg.enabled,
            "entries_per_port": sim.merge_cfg.entries_per_port,
            "table_bytes_per_port": sim.merge_cfg.bytes_per_port,
        }
        denom = agg["hits"] + agg["misses"] + agg["bypasses"]
        agg["hit_rate"] = (agg["hits"] / denom) if denom else 0.0
        return agg

    @staticmethod
    def _sync_stats(sim: "Simulation") -> dict:
        regs = sum(sw.sync_table.registers for sw in sim.switches)
        rels = sum(sw.sync_table.releases for sw in sim.switches)
        waits = []
        for sw in sim.switches:
            for (gid, phase), (t0, t1, tr) in sw.sync_table.timeline.items():
                if tr >= 0:
                    waits.append(t1 - t0)
        return {
            "registers": regs,
            "releases": rels,
            "sync_reqs_sent": sum(g.sync_reqs_sent for g in sim.gpus),
            "sync_releases_seen": sum(g.sync_releases_seen for g in sim.gpus),
            "groups_synced": len({k[0] for sw in sim.switches
                                  for k in sw.sync_table.timeline}),
            "mean_rendezvous_ns": (sum(waits) / len(waits)) if waits else 0.0,
            "throttle_on_edges": sum(sw.throttle.on_edges for sw in sim.switches
                                     if sw.throttle is not None),
            "throttle_off_edges": sum(sw.throttle.off_edges for sw in sim.switches
                                      if sw.throttle is not None),
            "tbs_parked": sum(g.gate.parked_total for g in sim.gpus
                              if g.gate is not None),
            "max_load_latency_ns": max((g.max_load_latency_ns for g in sim.gpus),
                                       default=0),
            "max_red_latency_ns": max((g.max_red_latency_ns for g in sim.gpus),
                                      default=0),
            "unanswered_requests": sum(len(g._load_issued_at) +
                                       len(g._red_issued_at) for g in sim.gpus),
        }

    @staticmethod
    def _conservation(sim: "Simulation") -> dict:
        tables = [t for sw in sim.switches for t in sw.tables]
        absorbed = sum(t.red_bytes_absorbed for t in tables)
        flushed = sum(t.red_bytes_flushed for t in tables)
        remote_issued = sum(g.red_remote_issued for g in sim.gpus)
        local_applied = sum(g.red_local_applied for g in sim.gpus)
        applied = sum(m.total_contributions for m in sim.memories_list())
        return {
            "red_bytes_absorbed": absorbed,
            "red_bytes_flushed": flushed,
            "red_remote_issued": remote_issued,
            "red_local_applied": local_applied,
            "contributions_applied": applied,
            "balanced": (absorbed == flushed and
                         applied == remote_issued + local_applied),
        }

    @property
    def fully_merged(self) -> bool:
        m = self.merge
        return (m["bypasses"] == 0 and m["lru_evictions"] == 0 and
                m["timeout_evictions"] == 0 and m["entries_left"] == 0)

    def payload_breakdown(self) -> dict:
        c = self.counters
        return {
            "up": c.payload_bytes(up=True),
            "down": c.payload_bytes(up=False),
            "up_load": c.payload_bytes(up=True, cls=int(VcClass.LOAD)),
            "down_load": c.payload_bytes(up=False, cls=int(VcClass.LOAD)),
            "up_reduction": c.payload_bytes(up=True, cls=int(VcClass.REDUCTION)),
            "down_reduction": c.payload_bytes(up=False, cls=int(VcClass.REDUCTION)),
        }

    def summary(self) -> dict:
        cfg = self.cfg
        return {
            "workload": self.workload_name,
            "mode": cfg.mode.value,
            "n_gpus": cfg.n_gpus,
            "n_switches": cfg.n_switches,
            "seed": cfg.seed,
            "entries_per_port": cfg.entries_per_port,
            "merge_timeout_ns": cfg.merge_timeout_ns,
            "link_bandwidth_bytes_per_us": cfg.resolved_bandwidth(),
            "link_latency_ns": cfg.link_latency_ns,
            "makespan_ns": self.makespan_ns,
            "end_ns": self.end_ns,
            "events": self.events,
            "completed": self.completed,
            "aborted": self.aborted,
            "fully_merged": self.fully_merged,
            "flits_balanced": self.flits_balanced,
            "utilization": {
                "up_mean": self.counters.mean_utilization(self.makespan_ns, up=True),
                "down_mean": self.counters.mean_utilization(self.makespan_ns, up=False),
                "mean": self.counters.mean_utilization(self.makespan_ns),
                "steady_mean": self.counters.steady_utilization(self.makespan_ns),
            },
            "payload_bytes": self.payload_breakdown(),
            "traffic": self.counters.direction_summary(),
            "merge": self.merge,
            "sync": self.sync,
            "spread": self.waits.summary(),
            "conservation": self.conservation,
            "event_log_sha256": self.event_log_sha256,
        }

    def write_artifacts(self, outdir) -> dict:
        import os
        os.makedirs(outdir, exist_ok=True)
        paths = {
            "summary": os.path.join(outdir, "summary.json"),
            "utilization": os.path.join(outdir, "utilization.csv"),
            "occupancy": os.path.join(outdir, "occupancy.csv"),
            "spreads": os.path.join(outdir, "spreads.csv"),
            "group_timeline": os.path.join(outdir, "group_timeline.csv"),
        }
        dump_summary(paths["summary"], self.summary())
        write_utilization_csv(paths["utilization"], self.counters)
        write_occupancy_csv(paths["occupancy"], self.occupancy)
        write_spreads_csv(paths["spreads"], self.waits)
        write_group_timeline_csv(paths["group_timeline"], self.group_timeline)
        if self.counters.trace:
            paths["packets"] = os.path.join(outdir, "packets.csv")
            write_packet_trace_csv(paths["packets"], self.counters)
        return paths


class Simulation:
    def __init__(self, cfg: ExperimentConfig, workload: Workload):
        cfg.validate()
        workload.validate(cfg.n_gpus)
        self.cfg = cfg
        self.wl = workload
        self.features = cfg.mode.features()
        self.engine = EventQueue()
        self.counters = TrafficCounters(trace_links=frozenset(cfg.trace_link_ids))
        self.waits = WaitStats()
        self.occupancy = OccupancySampler()
        self.ehash = EventLogHash() if cfg.hash_events else None
        self.amap = workload.address_map
        self.merge_cfg = MergeTableConfig(
            entries_per_port=cfg.entries_per_port,
            participating_gpus=cfg.n_gpus,
            timeout_ns=cfg.merge_timeout_ns,
            enabled=cfg.merge_enabled)
        self.loads_delivered: dict = {}
        self.last_completion_ns = 0
        self.aborted: Optional[str] = None

        graph = workload.graph
        self.grouping = group_tbs(graph.kernels, cfg.n_gpus)
        self.dag = build_tb_dag(graph, cfg.n_gpus)
        self.tracker = DependencyTracker(
            self.dag, "fused" if self.features.fused_scheduling else "barrier")

        if self.features.sm_overlap:
            slots, self.pool_of = partition_sms(
                graph.kernels, cfg.compute.n_sms, cfg.compute.tb_slots_per_sm)
            self.class_quota = slots if len(slots) > 1 else None
        else:
            self.pool_of = {k.kernel_id: 0 for k in graph.kernels}
            self.class_quota = None

        skew = cfg.compute.gpu_skew_ns
        if cfg.n_gpus > 1 and skew:
            self.skew_offsets = [g * skew // (cfg.n_gpus - 1)
                                 for g in range(cfg.n_gpus)]
        else:
            self.skew_offsets = [0] * cfg.n_gpus

        self.tbs = self._instantiate_tbs(graph)

        # Fabric.
        bw = cfg.resolved_bandwidth()
        lat = cfg.link_latency_ns
        self.up_links = [[None] * cfg.n_switches for _ in range(cfg.n_gpus)]
        self.down_links = [[None] * cfg.n_gpus for _ in range(cfg.n_switches)]
        self.all_links: list[Link] = []
        lid = 0
        for g in range(cfg.n_gpus):
            for s in range(cfg.n_switches):
                up = Link(lid, g, s, True, bw, lat, self.engine,
                          self._deliver_to_switch, sink=self.counters)
                self.up_links[g][s] = up
                self.all_links.append(up)
                lid += 1
                down = Link(lid, g, s, False, bw, lat, self.engine,
                            self._deliver_to_gpu, sink=self.counters)
                self.down_links[s][g] = down
                self.all_links.append(down)
                lid += 1

        self.gpus = [GpuRuntime(self, g) for g in range(cfg.n_gpus)]
        self.switches = [SwitchRuntime(self, s) for s in range(cfg.n_switches)]

        if cfg.track_values:
            self._preinit_values()

    # ---- construction helpers ----------------------------------------------

    def _instantiate_tbs(self, graph) -> list[_TB]:
        cfg = self.cfg
        kmap = {k.kernel_id: k for k in graph.kernels}
        overlap = cfg.compute.preaccess_overlap
        tbs: list[_TB] = []
        for node in self.dag.nodes:
            k = kmap[node.kernel]
            compute_ns = tb_compute_ns(k.flops_per_tb, k.local_bytes_per_tb,
                                       cfg.compute)
            busy = compute_ns - cfg.compute.launch_overhead_ns
            extra = math.ceil((1.0 - overlap) * busy)
            mergeable = node.kernel in self.grouping.mergeable_kernels
            bind = {"gpu": node.gpu, "bx": node.block[0]}
            if len(node.block) > 1:
                bind["by"] = node.block[1]
            ops = []
            for tpl in k.mem_ops:
                if not tpl.remote:
                    continue
                base = tpl.base_expr.evaluate(bind)
                ops.append(MemOp(tpl.is_reduction,
                                 AddressPattern(base, tpl.rows, tpl.row_stride,
                                                tpl.row_bytes),
                                 mergeable))
            gid = self.grouping.gid(node.kernel, node.block)
            tbs.append(_TB(node.uid, node.gpu, node.kernel, node.block, gid,
                           self.pool_of[node.kernel], compute_ns, extra,
                           tuple(ops)))
        return tbs

    def _preinit_values(self) -> None:
        for name in self.wl.preinit_tensors:
            layout = self.wl.layouts[name]
            for start, end, owner in layout.regions():
                addr = start
                while addr < end:
                    self.gpus[owner].memory.init_value(
                        addr, self.seed_value(addr))
                    addr += 128

    def seed_value(self, addr: int) -> np.ndarray:
        rng = np.random.default_rng((self.cfg.seed, addr, 0xC0FFEE))
        if self.cfg.value_dtype == "int64":
            return rng.integers(-999, 1000, size=self.cfg.value_width,
                                dtype=np.int64)
        return rng.standard_normal(self.cfg.value_width)

    def red_value(self, addr: int, gpu: int) -> np.ndarray:
        rng = np.random.default_rng((self.cfg.seed, addr, gpu + 1))
        if self.cfg.value_dtype == "int64":
            return rng.integers(-999, 1000, size=self.cfg.value_width,
                                dtype=np.int64)
        return rng.standard_normal(self.cfg.value_width)

    # ---- fabric plumbing -----------------------------------------------------

    def topo_route(self, addr: int) -> int:
        return (addr // self.cfg.interleave_bytes) % self.cfg.n_switches

    def send_up(self, gpu: int, switch: int, pkt: Packet) -> None:
        self.up_links[gpu][switch].send(pkt)

    def send_down(self, switch: int, gpu: int, pkt: Packet) -> None:
        self.down_links[switch][gpu].send(pkt)

    def _deliver_to_switch(self, pkt: Packet, link: Link) -> None:
        if self.ehash is not None:
            self.ehash.add(self.engine.now, "u", link.link_id, pkt.kind,
                           pkt.src_gpu, pkt.target_gpu, pkt.addr, pkt.payload,
                           pkt.merged_count)
        self.switches[link.switch].on_packet(pkt, link)

    def _deliver_to_gpu(self, pkt: Packet, link: Link) -> None:
        if self.ehash is not None:
            self.ehash.add(self.engine.now, "d", link.link_id, pkt.kind,
                           pkt.src_gpu, pkt.target_gpu, pkt.addr, pkt.payload,
                           pkt.merged_count)
        self.gpus[link.gpu].on_packet(pkt, link)

    # ---- completion plumbing ---------------------------------------------------

    def on_reductions_applied(self, contributors: tuple) -> None:
        for tb_uid in contributors:
            tb = self.tbs[tb_uid]
            tb.pending_reds -= 1
            if tb.pending_reds < 0:
                raise InternalFault(f"TB {tb_uid}: reduction applied twice")
            if tb.pending_reds == 0 and tb.compute_done and tb.state == S_DRAIN:
                self.finish_tb(tb)

    def finish_tb(self, tb: _TB) -> None:
        now = self.engine.now
        tb.state = S_DONE
        if now > self.last_completion_ns:
            self.last_completion_ns = now
        for uid in self.tracker.complete(tb.uid):
            node = self.dag.nodes[uid]
            self.gpus[node.gpu].on_ready(uid)

    def memories_list(self) -> list[HomeMemory]:
        return [g.memory for g in self.gpus]

    # ---- main loop ------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        for uid in self.tracker.initial_ready():
            gpu = self.dag.nodes[uid].gpu
            self.engine.push(self.skew_offsets[gpu], EV_GPU, gpu,
                             self.gpus[gpu].on_ready, uid)
        limit = cfg.sim_time_limit_ns or None
        while True:
            n = self.engine.advance()
            if n == 0:
                break
            if self.engine.dispatched > cfg.max_events:
                self.aborted = "max_events"
                break
            if limit is not None and self.engine.now > limit:
                self.aborted = "sim_time_limit"
                break
        if self.aborted is None and not self.tracker.all_complete:
            self.aborted = "deadlock"
        return RunResult(self)


def run_experiment(cfg: ExperimentConfig, workload: Workload) -> RunResult:
    return Simulation(cfg, workload).run()
