"""GPU-side building blocks: coalescing, roofline timing, SM slots, memory.

Thread blocks are the scheduling unit.  A TB's remote traffic is described
by address patterns (strided row accesses over globally laid-out tensors);
at issue time each row is split into 32 B sectors and coalesced into
bursts of at most 128 B that never straddle a 128 B-aligned boundary —
one burst becomes one fabric packet.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import InternalFault
from .fabric import MAX_PAYLOAD_BYTES, SECTOR_BYTES


def coalesce_range(start: int, nbytes: int) -> list[tuple[int, int]]:
    """Split a byte range into sector-aligned bursts.

    Bursts are at most 128 B and never cross a 128 B-aligned boundary, so
    every burst maps to exactly one merge-table address.
    """
    if nbytes <= 0:
        return []
    lo = (start // SECTOR_BYTES) * SECTOR_BYTES
    hi = -(-(start + nbytes) // SECTOR_BYTES) * SECTOR_BYTES
    out = []
    pos = lo
    while pos < hi:
        window_end = (pos // MAX_PAYLOAD_BYTES + 1) * MAX_PAYLOAD_BYTES
        end = min(hi, window_end)
        out.append((pos, end - pos))
        pos = end
    return out


@dataclass(frozen=True)
class AddressPattern:
    """Strided access: ``rows`` rows of ``row_bytes`` each, ``row_stride``
    bytes apart, starting at ``base``."""

    base: int
    rows: int
    row_stride: int
    row_bytes: int

    def ranges(self) -> Iterator[tuple[int, int]]:
        for r in range(self.rows):
            yield self.base + r * self.row_stride, self.row_bytes

    def bursts(self) -> Iterator[tuple[int, int]]:
        for start, nbytes in self.ranges():
            yield from coalesce_range(start, nbytes)

    @property
    def total_bytes(self) -> int:
        return self.rows * self.row_bytes


@dataclass(frozen=True)
class MemOp:
    """One remote-capable access of a thread block."""

    is_reduction: bool
    pattern: AddressPattern
    mergeable: bool


@dataclass(frozen=True)
class ThreadBlock:
    uid: int
    gpu: int
    kernel: int
    block: tuple
    compute_ns: int
    mem_ops: tuple[MemOp, ...]
    group: int = -1          # -1: ungrouped
    pool: int = 0            # SM partition


@dataclass(frozen=True)
class ComputeConfig:
    n_sms: int = 66
    tb_slots_per_sm: int = 2
    flops_per_ns_per_sm: float = 7500.0
    local_bytes_per_ns_per_sm: float = 50.0
    launch_overhead_ns: int = 500
    local_read_ns: int = 0
    preaccess_overlap: float = 1.0
    reduction_issue: str = "end"       # "end" (default) or "start"
    gpu_skew_ns: int = 0
    tb_jitter_ns: int = 0
    # Memory-system caps on un-answered remote lines per GPU.  Sized near
    # the fabric's bandwidth-delay product so links stay fed; they are
    # also what keeps a whole resident wave of thread blocks from opening
    # more switch sessions than exist in silicon.  Loads recycle on the
    # data response; stores recycle on the switch's single-flit ack.
    max_outstanding_loads: int = 4096
    max_outstanding_stores: int = 4096

    def validate(self) -> None:
        if self.n_sms < 1:
            raise ValueError("n_sms must be >= 1")
        if self.tb_slots_per_sm < 1:
            raise ValueError("tb_slots_per_sm must be >= 1")
        if self.max_outstanding_loads < 1:
            raise ValueError("max_outstanding_loads must be >= 1")
        if self.max_outstanding_stores < 1:
            raise ValueError("max_outstanding_stores must be >= 1")
        if not 0.0 <= self.preaccess_overlap <= 1.0:
            raise ValueError("preaccess_overlap must be in [0, 1]")
        if self.reduction_issue not in ("end", "start"):
            raise ValueError("reduction_issue must be 'end' or 'start'")

    @property
    def total_slots(self) -> int:
        return self.n_sms * self.tb_slots_per_sm


def tb_compute_ns(flops: float, local_bytes: float, cfg: ComputeConfig) -> int:
    """Roofline thread-block duration plus fixed launch overhead.

    Resident TBs statically share an SM, so a TB sees ``1/tb_slots_per_sm``
    of the SM's compute and local-memory throughput.
    """
    flop_rate = cfg.flops_per_ns_per_sm / cfg.tb_slots_per_sm
    mem_rate = cfg.local_bytes_per_ns_per_sm / cfg.tb_slots_per_sm
    busy = max(flops / flop_rate, local_bytes / mem_rate) if (flops or local_bytes) else 0.0
    return cfg.launch_overhead_ns + math.ceil(busy)


class SlotPools:
    """SM thread-block slots, optionally split into disjoint partitions."""

    def __init__(self, slots_per_pool: list[int]):
        if any(s < 0 for s in slots_per_pool):
            raise InternalFault("negative slot count")
        self.capacity = list(slots_per_pool)
        self.free = list(slots_per_pool)

    def acquire(self, pool: int) -> bool:
        if self.free[pool] > 0:
            self.free[pool] -= 1
            return True
        return False

    def release(self, pool: int) -> None:
        self.free[pool] += 1
        if self.free[pool] > self.capacity[pool]:
            raise InternalFault(f"pool {pool}: released more slots than acquired")


class AddressMap:
    """Global address layout: sorted disjoint regions, each owned by a GPU."""

    def __init__(self, regions: list[tuple[int, int, int]]):
        regions = sorted(regions)
        for (s0, e0, _), (s1, _, _) in zip(regions, regions[1:]):
            if s1 < e0:
                raise InternalFault(f"overlapping address regions at {s1:#x}")
        self._starts = [r[0] for r in regions]
        self._regions = regions

    def owner(self, addr: int) -> int:
        i = bisect_right(self._starts, addr) - 1
        if i < 0:
            raise InternalFault(f"address {addr:#x} below mapped space")
        start, end, owner = self._regions[i]
        if addr >= end:
            raise InternalFault(f"address {addr:#x} not mapped")
        return owner


class HomeMemory:
    """Memory-side accumulation at one home GPU.

    Reduction writes apply additively and commute, so partial writebacks
    from evicted sessions land correctly in any order.  When value tracking
    is on, payloads are numpy vectors and loads return snapshots.
    """

    def __init__(self, gpu: int, track_values: bool):
        self.gpu = gpu
        self.track_values = track_values
        self.values: dict[int, np.ndarray] = {}
        self.contributions: dict[int, int] = {}
        self.total_contributions = 0

    def init_value(self, addr: int, value: np.ndarray) -> None:
        self.values[addr] = value.copy()

    def apply_reduction(self, addr: int, count: int, value) -> None:
        self.total_contributions += count
        self.contributions[addr] = self.contributions.get(addr, 0) + count
        if self.track_values and value is not None:
            if addr in self.values:
                self.values[addr] = self.values[addr] + value
            else:
                self.values[addr] = np.array(value, copy=True)

    def read(self, addr: int):
        if not self.track_values:
            return None
        v = self.values.get(addr)
        return None if v is None else v.copy()


class ThrottleGate:
    """Per-GPU hold-back of mergeable TBs at the pre-access boundary.

    Throttling gates whole thread blocks, never packets already in flight:
    a TB that passed its pre-access point has committed its burst volley to
    the wire, and withholding any of those packets would stall the very
    merge sessions its peers are waiting on.  So while any switch has this
    GPU throttled, mergeable TBs park *before* their pre-access sync
    request; everything already issued keeps draining, the GPU's session
    lead falls, and the gate reopens.  Non-mergeable work is unaffected.
    """

    def __init__(self, n_switches: int):
        self.throttled = [False] * n_switches
        self.parked: list[int] = []         # TB uids in dispatch order
        self.parked_total = 0

    @property
    def active(self) -> bool:
        return any(self.throttled)

    def park(self, tb_uid: int) -> None:
        self.parked.append(tb_uid)
        self.parked_total += 1

    def set_state(self, switch: int, on: bool) -> list[int]:
        """Update one switch's state; returns TBs released when the last
        throttle clears."""
        self.throttled[switch] = on
        if self.active:
            return []
        released = self.parked
        self.parked = []
        return released
