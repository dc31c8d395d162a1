"""Per-port merge tables: in-switch load deduplication and reduction folding.

Each switch output port (the port facing one home GPU) owns a small
associative table.  Mergeable requests from different GPUs to the same
128 B-aligned address converge on that port and collapse into a single
*session*:

* loads      — fetch the burst from the home GPU once, replicate the
               response to every deferred requester;
* reductions — accumulate contributions inside the table and emit a single
               writeback once every remote peer has contributed.

A session is released exactly when ``participating_gpus - 1`` requesters
have joined.  The table never blocks: when it is full and nothing is
evictable the incoming request simply bypasses merging, and idle entries
are reclaimed by LRU eviction or timeout so a straggler can never wedge
the switch.

The table is deliberately fabric-agnostic: every handler returns a list of
*actions* (fetch / respond / writeback / forward) that the caller turns
into packets.  That makes the state machine testable in isolation and
keeps an unmerged reference run (``enabled=False``) trivially comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from .errors import ProtocolFault
from .fabric import MAX_PAYLOAD_BYTES

ENTRY_CONTENT_BYTES = 128     # provisioned content budget per entry


class EntryStatus(IntEnum):
    LOAD_WAIT = 0      # fetch outstanding; deferred requesters queue here
    LOAD_READY = 1     # data cached; later requesters are served directly
    REDUCTION = 2      # partial sum accumulating


# Action opcodes returned to the switch.  Fetch/respond/forward actions
# always concern the address of the request being handled; a writeback may
# flush an *evicted* session instead, so it carries its own address.
A_FETCH = 0        # (A_FETCH, gpu, tb_uid, bypass, req_bytes) -> load_req to home
A_RESPOND = 1      # (A_RESPOND, gpu, tb_uid, payload, value)
A_WRITEBACK = 2    # (A_WRITEBACK, addr, payload, count, contributors, value)
A_FORWARD_RED = 3  # (A_FORWARD_RED, gpu, tb_uid, payload, value)  unmerged


class MergeEntry:
    __slots__ = ("addr", "is_red", "status", "count", "payload", "value",
                 "deferred", "contributors", "initiator", "group",
                 "fetched_for", "last_access", "created", "seq")

    def __init__(self, addr: int, is_red: bool, status: int, payload: int,
                 gpu: int, tb_uid: int, now: int, seq: int, group: int = -1):
        self.addr = addr
        self.is_red = is_red
        self.status = status
        self.count = 1
        self.payload = payload
        self.value = None
        self.deferred: list[tuple[int, int]] = []
        self.contributors: list[int] = []
        self.initiator = gpu
        self.group = group
        self.fetched_for = (gpu, tb_uid)
        self.last_access = now
        self.created = now
        self.seq = seq

    @property
    def content_bytes(self) -> int:
        if self.status == EntryStatus.LOAD_WAIT:
            return 8 * len(self.deferred)       # requester records only
        return self.payload                     # cached data / partial sum


@dataclass(frozen=True)
class MergeTableConfig:
    entries_per_port: int = 320
    participating_gpus: int = 8
    timeout_ns: int = 10_000
    enabled: bool = True

    @property
    def bytes_per_port(self) -> int:
        return self.entries_per_port * ENTRY_CONTENT_BYTES

    def validate(self) -> None:
        if self.entries_per_port < 1:
            raise ValueError("entries_per_port must be >= 1")
        if self.participating_gpus < 2:
            raise ValueError("participating_gpus must be >= 2")
        if self.timeout_ns < 1:
            raise ValueError("timeout_ns must be >= 1")


class MergeTable:
    """Merge table for one switch output port (one home GPU)."""

    def __init__(self, cfg: MergeTableConfig, home_gpu: int, on_delta=None):
        cfg.validate()
        self.cfg = cfg
        self.home_gpu = home_gpu
        self.entries: dict[tuple[int, bool], MergeEntry] = {}
        self._seq = 0
        # Live sessions initiated per GPU; the throttle controller reads this
        # (and can subscribe to changes via ``on_delta(gpu, +/-1, group)``).
        self.initiated_live: dict[int, int] = {}
        self.on_delta = on_delta
        # Counters.
        self.hits = 0
        self.misses = 0
        self.bypasses = 0
        self.lru_evictions = 0
        self.timeout_evictions = 0
        self.sessions_load = 0
        self.sessions_red = 0
        self.peak_entries = 0
        self.peak_bytes = 0
        # Conservation bookkeeping (payload bytes).
        self.red_bytes_absorbed = 0       # mergeable contributions accepted
        self.red_bytes_written = 0        # writeback payloads emitted (wire bytes)
        self.red_bytes_flushed = 0        # payload x merged-count, per writeback

    # -- bookkeeping ------------------------------------------------------

    @property
    def entries_used(self) -> int:
        return len(self.entries)

    @property
    def bytes_used(self) -> int:
        return sum(e.content_bytes for e in self.entries.values())

    def lookup(self, addr: int, is_red: bool) -> Optional[MergeEntry]:
        """Pure lookup; no LRU touch, no side effects."""
        return self.entries.get((addr, is_red))

    def lead(self, gpu: int) -> int:
        return self.initiated_live.get(gpu, 0)

    def _note_peak(self) -> None:
        n = len(self.entries)
        if n > self.peak_entries:
            self.peak_entries = n
        b = self.bytes_used
        if b > self.peak_bytes:
            self.peak_bytes = b

    def _insert(self, entry: MergeEntry) -> None:
        self.entries[(entry.addr, entry.is_red)] = entry
        self.initiated_live[entry.initiator] = self.initiated_live.get(entry.initiator, 0) + 1
        self._note_peak()
        if self.on_delta is not None:
            self.on_delta(entry.initiator, 1, entry.group)

    def _remove(self, entry: MergeEntry) -> None:
        del self.entries[(entry.addr, entry.is_red)]
        self.initiated_live[entry.initiator] -= 1
        if self.on_delta is not None:
            self.on_delta(entry.initiator, -1, entry.group)

    def _writeback_action(self, entry: MergeEntry):
        self.red_bytes_written += entry.payload
        self.red_bytes_flushed += entry.count * entry.payload
        return (A_WRITEBACK, entry.addr, entry.payload, entry.count,
                tuple(entry.contributors), entry.value)

    def _make_room(self, now: int, actions: list) -> bool:
        """LRU-evict one evictable entry; LoadWait entries are pinned."""
        victim = None
        for e in self.entries.values():
            if e.status == EntryStatus.LOAD_WAIT:
                continue
            if victim is None or (e.last_access, e.seq) < (victim.last_access, victim.seq):
                victim = e
        if victim is None:
            return False
        if victim.status == EntryStatus.REDUCTION:
            actions.append(self._writeback_action(victim))
        # LOAD_READY: cached data is a pure copy; discarding it is safe.
        self._remove(victim)
        self.lru_evictions += 1
        return True

    # -- request handling -------------------------------------------------

    def handle_load(self, addr: int, payload: int, gpu: int, tb_uid: int,
                    now: int, group: int = -1) -> list:
        if payload > MAX_PAYLOAD_BYTES:
            raise ProtocolFault(f"load burst of {payload} B exceeds {MAX_PAYLOAD_BYTES} B")
        actions: list = []
        if not self.cfg.enabled:
            self.bypasses += 1
            actions.append((A_FETCH, gpu, tb_uid, True, payload))
            return actions
        entry = self.entries.get((addr, False))
        if entry is None:
            if len(self.entries) >= self.cfg.entries_per_port and \
                    not self._make_room(now, actions):
                self.bypasses += 1
                actions.append((A_FETCH, gpu, tb_uid, True, payload))
                return actions
            self._seq += 1
            entry = MergeEntry(addr, False, EntryStatus.LOAD_WAIT, payload,
                               gpu, tb_uid, now, self._seq, group)
            entry.deferred.append((gpu, tb_uid))
            self._insert(entry)
            self.misses += 1
            actions.append((A_FETCH, gpu, tb_uid, False, payload))
            return actions

        limit = self.cfg.participating_gpus - 1
        if entry.count >= limit:
            raise ProtocolFault(
                f"load session {addr:#x} joined by more than {limit} requesters")
        entry.count += 1
        entry.last_access = now
        self.hits += 1
        if entry.status == EntryStatus.LOAD_WAIT:
            entry.deferred.append((gpu, tb_uid))
            self._note_peak()
        else:  # LOAD_READY: serve from cached data
            actions.append((A_RESPOND, gpu, tb_uid, entry.payload, entry.value))
            if entry.count == limit:
                self._remove(entry)
                self.sessions_load += 1
        return actions

    def handle_load_response(self, addr: int, payload: int, value, now: int,
                             fetched_for: Optional[tuple[int, int]] = None
                             ) -> Optional[list]:
        """Home data returned.  ``None`` means no session: the caller must
        unicast the response to the single requester carried in the packet
        (bypassed or evicted session).

        ``fetched_for`` identifies the fetch this response answers.  If a
        session timed out and a fresh one was opened for the same address,
        the stale response must not satisfy the new session — its own fetch
        is still in flight."""
        entry = self.entries.get((addr, False))
        if entry is None:
            return None
        if fetched_for is not None and entry.fetched_for != fetched_for:
            return None
        if entry.status != EntryStatus.LOAD_WAIT:
            raise ProtocolFault(f"duplicate load response for {addr:#x}")
        actions = [(A_RESPOND, g, t, payload, value) for g, t in entry.deferred]
        entry.deferred.clear()
        entry.status = EntryStatus.LOAD_READY
        entry.payload = payload
        entry.value = value
        entry.last_access = now
        if entry.count == self.cfg.participating_gpus - 1:
            self._remove(entry)
            self.sessions_load += 1
        return actions

    def handle_reduction(self, addr: int, payload: int, gpu: int, tb_uid: int,
                         value, now: int, group: int = -1) -> list:
        if payload > MAX_PAYLOAD_BYTES:
            raise ProtocolFault(f"reduction burst of {payload} B exceeds {MAX_PAYLOAD_BYTES} B")
        actions: list = []
        if not self.cfg.enabled:
            self.bypasses += 1
            actions.append((A_FORWARD_RED, gpu, tb_uid, payload, value))
            return actions
        entry = self.entries.get((addr, True))
        if entry is None:
            if len(self.entries) >= self.cfg.entries_per_port and \
                    not self._make_room(now, actions):
                self.bypasses += 1
                actions.append((A_FORWARD_RED, gpu, tb_uid, payload, value))
                return actions
            self.red_bytes_absorbed += payload
            self._seq += 1
            entry = MergeEntry(addr, True, EntryStatus.REDUCTION, payload,
                               gpu, tb_uid, now, self._seq, group)
            entry.value = value
            entry.contributors.append(tb_uid)
            self.misses += 1
            if entry.count == self.cfg.participating_gpus - 1:
                # 2-GPU degenerate case: a single contribution completes.
                actions.append(self._writeback_action(entry))
                self.sessions_red += 1
                return actions
            self._insert(entry)
            return actions

        if payload != entry.payload:
            raise ProtocolFault(
                f"reduction size mismatch at {addr:#x}: {payload} != {entry.payload}")
        self.red_bytes_absorbed += payload
        entry.count += 1
        entry.last_access = now
        entry.contributors.append(tb_uid)
        if value is not None:
            entry.value = entry.value + value
        self.hits += 1
        if entry.count == self.cfg.participating_gpus - 1:
            actions.append(self._writeback_action(entry))
            self._remove(entry)
            self.sessions_red += 1
        return actions

    # -- forward progress -------------------------------------------------

    def tick_timeouts(self, now: int) -> list:
        """Evict every entry idle past the timeout.

        LoadWait sessions are downgraded: each deferred requester other than
        the one whose fetch is already in flight is re-issued as an
        independent (bypass) load, so every requester still completes.
        Reduction entries flush a partial writeback; LoadReady caches are
        discarded.

        Unlike the per-request handlers, a scan spans many addresses, so
        actions come back as ``(addr, action)`` pairs."""
        deadline = now - self.cfg.timeout_ns
        expired = [e for e in self.entries.values() if e.last_access <= deadline]
        actions: list = []
        for entry in expired:
            if entry.status == EntryStatus.LOAD_WAIT:
                for g, t in entry.deferred:
                    if (g, t) != entry.fetched_for:
                        actions.append((entry.addr, (A_FETCH, g, t, True, entry.payload)))
            elif entry.status == EntryStatus.REDUCTION:
                actions.append((entry.addr, self._writeback_action(entry)))
            self._remove(entry)
            self.timeout_evictions += 1
        return actions

    def next_deadline(self) -> Optional[int]:
        if not self.entries:
            return None
        return min(e.last_access for e in self.entries.values()) + self.cfg.timeout_ns
