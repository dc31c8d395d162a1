"""Cross-GPU thread-block coordination: grouping, sync tables, throttling.

Tensor-parallel kernels are SPMD: the TB with a given block index runs on
every GPU and — when its address expressions do not depend on the GPU id —
touches identical global addresses.  Those TBs form a *group*.  A static
pass over the kernels' affine index expressions finds the groups; at run
time a switch-hosted count-and-release table aligns each group twice
(once before dispatch, once before its first mergeable access), which is
what turns per-GPU schedule drift into near-simultaneous request arrival
at the merge tables.

The handshake is deliberately minimal: one empty request packet up and one
empty release packet down per TB per GPU per phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ProtocolFault

PHASE_PRELAUNCH = 0
PHASE_PREACCESS = 1


class IndexExpr:
    """Affine expression over block/thread indices, the GPU id and constants.

    Stored as ``{var: coeff}`` plus a constant.  Variables are free-form
    strings; ``"gpu"`` is the one with coordination semantics: expressions
    without a ``gpu`` term evaluate identically on every GPU, making the
    access mergeable.
    """

    __slots__ = ("terms", "const")

    def __init__(self, terms: Optional[dict[str, int]] = None, const: int = 0):
        self.terms = {v: c for v, c in (terms or {}).items() if c != 0}
        self.const = const

    @classmethod
    def constant(cls, value: int) -> "IndexExpr":
        return cls({}, value)

    @classmethod
    def var(cls, name: str, coeff: int = 1) -> "IndexExpr":
        return cls({name: coeff}, 0)

    def __add__(self, other) -> "IndexExpr":
        if isinstance(other, int):
            return IndexExpr(self.terms, self.const + other)
        terms = dict(self.terms)
        for v, c in other.terms.items():
            terms[v] = terms.get(v, 0) + c
        return IndexExpr(terms, self.const + other.const)

    def scaled(self, k: int) -> "IndexExpr":
        return IndexExpr({v: c * k for v, c in self.terms.items()}, self.const * k)

    def evaluate(self, bindings: dict[str, int]) -> int:
        total = self.const
        for v, c in self.terms.items():
            try:
                total += c * bindings[v]
            except KeyError:
                raise ProtocolFault(f"unbound index variable '{v}'") from None
        return total

    @property
    def gpu_invariant(self) -> bool:
        return "gpu" not in self.terms

    def __eq__(self, other) -> bool:
        if not isinstance(other, IndexExpr):
            return NotImplemented
        return self.terms == other.terms and self.const == other.const

    def __hash__(self) -> int:
        return hash((frozenset(self.terms.items()), self.const))

    def __repr__(self):
        parts = [f"{c}*{v}" for v, c in sorted(self.terms.items())]
        parts.append(str(self.const))
        return " + ".join(parts)


@dataclass(frozen=True)
class TBGroup:
    gid: int
    kernel: int
    block: tuple
    n_members: int


@dataclass
class GroupingResult:
    groups: list[TBGroup]
    group_of: dict[tuple[int, tuple], int]       # (kernel_id, block) -> gid
    mergeable_kernels: set[int]

    def gid(self, kernel: int, block: tuple) -> int:
        return self.group_of.get((kernel, block), -1)


def group_tbs(kernels, n_gpus: int) -> GroupingResult:
    """Static grouping pass.

    A kernel whose remote accesses all have GPU-invariant base expressions
    gets one group per block index, spanning all GPUs.  Kernels with any
    GPU-dependent remote access are left ungrouped (their traffic is still
    legal, it just cannot be tagged mergeable).
    """
    groups: list[TBGroup] = []
    group_of: dict[tuple[int, tuple], int] = {}
    mergeable: set[int] = set()
    for k in kernels:
        remote_ops = [op for op in k.mem_ops if op.remote]
        if not remote_ops:
            continue
        if all(op.base_expr.gpu_invariant for op in remote_ops):
            mergeable.add(k.kernel_id)
            for block in k.blocks():
                gid = len(groups)
                groups.append(TBGroup(gid, k.kernel_id, block, n_gpus))
                group_of[(k.kernel_id, block)] = gid
    return GroupingResult(groups, group_of, mergeable)


def sync_home_switch(gid: int, n_switches: int) -> int:
    """Which switch hosts a group's sync entry (stable hash placement)."""
    return gid % n_switches


class GroupSyncTable:
    """Switch-side count-and-release table.

    ``register`` returns the GPUs to release when the last member arrives,
    else None.  The entry then resets so the same group can run its next
    phase.  Duplicate registration within a phase is a protocol fault.
    """

    def __init__(self, switch_id: int):
        self.switch_id = switch_id
        self.pending: dict[tuple[int, int], set[int]] = {}
        self.registers = 0
        self.releases = 0
        # (group, phase) -> [first_register_ns, last_register_ns, release_ns]
        self.timeline: dict[tuple[int, int], list[int]] = {}

    def register(self, gid: int, phase: int, gpu: int, expected: int,
                 now: int) -> Optional[list[int]]:
        key = (gid, phase)
        members = self.pending.setdefault(key, set())
        if gpu in members:
            raise ProtocolFault(
                f"duplicate sync registration: group {gid} phase {phase} gpu {gpu}")
        members.add(gpu)
        self.registers += 1
        tl = self.timeline.setdefault(key, [now, now, -1])
        tl[1] = now
        if len(members) < expected:
            return None
        del self.pending[key]
        self.releases += len(members)
        tl[2] = now
        return sorted(members)


class GpuSynchronizer:
    """GPU-side bookkeeping of TBs parked on a sync phase."""

    def __init__(self, gpu: int):
        self.gpu = gpu
        self.waiting: dict[tuple[int, int], int] = {}    # (gid, phase) -> tb_uid

    def park(self, gid: int, phase: int, tb_uid: int) -> None:
        key = (gid, phase)
        if key in self.waiting:
            raise ProtocolFault(
                f"gpu {self.gpu}: TB {tb_uid} re-parked on group {gid} phase {phase}")
        self.waiting[key] = tb_uid

    def on_release(self, gid: int, phase: int) -> int:
        try:
            return self.waiting.pop((gid, phase))
        except KeyError:
            raise ProtocolFault(
                f"gpu {self.gpu}: release for group {gid} phase {phase} "
                f"with no parked TB") from None


@dataclass(frozen=True)
class ThrottleConfig:
    lead_threshold: int = 8

    @property
    def resume_below(self) -> int:
        # Hysteresis at half the threshold avoids on/off flapping.
        return max(1, self.lead_threshold // 2)


class ThrottleController:
    """Switch-side lead tracking with hysteresis.

    ``lead`` counts group sessions this GPU is running ahead on: thread-block
    groups with at least one merge session at this switch that the GPU opened
    first and whose peers have not all caught up.  Counting whole groups
    rather than addresses makes the threshold independent of access size — a
    group touching 64 lines is one unit of "ahead", not 64 — and bounds
    table occupancy at ``threshold x lines-per-group``.  Crossing the
    threshold turns throttling on; dropping below half turns it off.
    ``update`` returns True/False on an edge, None otherwise.
    """

    def __init__(self, cfg: ThrottleConfig, n_gpus: int):
        self.cfg = cfg
        self._open: list[dict[int, int]] = [{} for _ in range(n_gpus)]
        self.active = [False] * n_gpus
        self.on_edges = 0
        self.off_edges = 0

    def lead(self, gpu: int) -> int:
        return len(self._open[gpu])

    def update(self, gpu: int, group: int, delta: int) -> Optional[bool]:
        live = self._open[gpu]
        n = live.get(group, 0) + delta
        if n < 0:
            raise ProtocolFault(f"negative session lead for gpu {gpu}")
        if n:
            live[group] = n
        else:
            live.pop(group, None)
        lead = len(live)
        if not self.active[gpu] and lead > self.cfg.lead_threshold:
            self.active[gpu] = True
            self.on_edges += 1
            return True
        if self.active[gpu] and lead < self.cfg.resume_below:
            self.active[gpu] = False
            self.off_edges += 1
            return False
        return None
