"""Graph-level dataflow: operator graphs, TB dependency DAGs, scheduling.

An operator graph is a set of SPMD kernels connected through named
tensors.  Each kernel declares, per block, affine input/output footprints
(row-granular intervals on a tensor).  Expanding footprint intersections
over every GPU yields the thread-block-level dependency DAG that the
fused scheduler runs on; the barrier scheduler collapses the same edges
to whole-kernel granularity (a TB may only start once every producer
kernel has fully completed, writes included).

Kernel overlap is expressed by partitioning SM slots: an upstream-heavy
kernel (emits reductions) and a downstream-heavy one (consumes remote
loads) each get half the SMs so their opposing traffic directions run
concurrently.
"""

from __future__ import annotations

import itertools
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterator

from .coordination import IndexExpr
from .errors import InternalFault


@dataclass(frozen=True)
class MemOpTemplate:
    """Per-block remote access pattern, affine in (bx, by, gpu).

    ``base_expr`` yields the byte address of the first row for a concrete
    (block, gpu) binding; rows advance by ``row_stride``.
    """

    is_reduction: bool
    base_expr: IndexExpr
    rows: int
    row_stride: int
    row_bytes: int
    remote: bool = True

    def to_dict(self) -> dict:
        return {
            "is_reduction": self.is_reduction,
            "base": {"terms": self.base_expr.terms, "const": self.base_expr.const},
            "rows": self.rows,
            "row_stride": self.row_stride,
            "row_bytes": self.row_bytes,
            "remote": self.remote,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemOpTemplate":
        return cls(d["is_reduction"], IndexExpr(d["base"]["terms"], d["base"]["const"]),
                   d["rows"], d["row_stride"], d["row_bytes"], d.get("remote", True))


@dataclass(frozen=True)
class FootprintTemplate:
    """Row-interval [expr, expr + length) on a tensor, affine in (bx, by, gpu)."""

    tensor: str
    start_expr: IndexExpr
    length: int

    def interval(self, bindings: dict[str, int]) -> tuple[int, int]:
        lo = self.start_expr.evaluate(bindings)
        return lo, lo + self.length

    def to_dict(self) -> dict:
        return {"tensor": self.tensor,
                "start": {"terms": self.start_expr.terms, "const": self.start_expr.const},
                "length": self.length}

    @classmethod
    def from_dict(cls, d: dict) -> "FootprintTemplate":
        return cls(d["tensor"], IndexExpr(d["start"]["terms"], d["start"]["const"]),
                   d["length"])


@dataclass(frozen=True)
class KernelSpec:
    kernel_id: int
    name: str
    grid: tuple[int, ...]                  # (nx,) or (nx, ny)
    flops_per_tb: float
    local_bytes_per_tb: float
    mem_ops: tuple[MemOpTemplate, ...] = ()
    inputs: tuple[FootprintTemplate, ...] = ()
    outputs: tuple[FootprintTemplate, ...] = ()

    def blocks(self) -> Iterator[tuple[int, ...]]:
        """Enumerate block ids with the first coordinate varying fastest,
        the launch order of a rasterized grid (x is the minor axis)."""
        for rev in itertools.product(*(range(n) for n in reversed(self.grid))):
            yield rev[::-1]

    @property
    def n_blocks(self) -> int:
        n = 1
        for d in self.grid:
            n *= d
        return n

    @property
    def emits_reductions(self) -> bool:
        return any(op.is_reduction and op.remote for op in self.mem_ops)

    @property
    def consumes_remote_loads(self) -> bool:
        return any(not op.is_reduction and op.remote for op in self.mem_ops)

    def traffic_class(self) -> str:
        up, down = self.emits_reductions, self.consumes_remote_loads
        if up and not down:
            return "upstream"
        if down and not up:
            return "downstream"
        return "neutral"

    def to_dict(self) -> dict:
        return {
            "kernel_id": self.kernel_id, "name": self.name, "grid": list(self.grid),
            "flops_per_tb": self.flops_per_tb,
            "local_bytes_per_tb": self.local_bytes_per_tb,
            "mem_ops": [m.to_dict() for m in self.mem_ops],
            "inputs": [f.to_dict() for f in self.inputs],
            "outputs": [f.to_dict() for f in self.outputs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["kernel_id"], d["name"], tuple(d["grid"]),
                   d["flops_per_tb"], d["local_bytes_per_tb"],
                   tuple(MemOpTemplate.from_dict(m) for m in d["mem_ops"]),
                   tuple(FootprintTemplate.from_dict(f) for f in d["inputs"]),
                   tuple(FootprintTemplate.from_dict(f) for f in d["outputs"]))


def _bindings(block: tuple[int, ...], gpu: int) -> dict[str, int]:
    b = {"gpu": gpu, "bx": block[0]}
    if len(block) > 1:
        b["by"] = block[1]
    return b


@dataclass(frozen=True)
class OperatorGraph:
    kernels: tuple[KernelSpec, ...]

    def kernel(self, kid: int) -> KernelSpec:
        for k in self.kernels:
            if k.kernel_id == kid:
                return k
        raise KeyError(kid)

    def kernel_edges(self) -> set[tuple[int, int]]:
        """(producer, consumer) pairs sharing a tensor."""
        writers: dict[str, set[int]] = {}
        for k in self.kernels:
            for f in k.outputs:
                writers.setdefault(f.tensor, set()).add(k.kernel_id)
        edges = set()
        for k in self.kernels:
            for f in k.inputs:
                for p in writers.get(f.tensor, ()):
                    if p != k.kernel_id:
                        edges.add((p, k.kernel_id))
        return edges

    def to_dict(self) -> dict:
        return {"kernels": [k.to_dict() for k in self.kernels]}

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorGraph":
        return cls(tuple(KernelSpec.from_dict(k) for k in d["kernels"]))


@dataclass(frozen=True)
class TbNode:
    uid: int
    kernel: int
    block: tuple[int, ...]
    gpu: int


class TBDependencyDAG:
    """Thread-block-level dependency graph across all GPUs."""

    def __init__(self):
        self.nodes: list[TbNode] = []
        self.deps: list[list[int]] = []
        self.dependents: list[list[int]] = []
        self.uid_of: dict[tuple[int, tuple, int], int] = {}

    def add_node(self, kernel: int, block: tuple, gpu: int) -> int:
        uid = len(self.nodes)
        self.nodes.append(TbNode(uid, kernel, block, gpu))
        self.deps.append([])
        self.dependents.append([])
        self.uid_of[(kernel, block, gpu)] = uid
        return uid

    def add_edge(self, producer: int, consumer: int) -> None:
        self.deps[consumer].append(producer)
        self.dependents[producer].append(consumer)

    @property
    def n_edges(self) -> int:
        return sum(len(d) for d in self.deps)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(p, c) for c, ds in enumerate(self.deps) for p in ds}


def build_tb_dag(graph: OperatorGraph, n_gpus: int) -> TBDependencyDAG:
    """Expand footprint intersections into TB-level edges.

    Producer output intervals are disjoint within one (kernel, gpu), so
    each per-(kernel, gpu) interval list can be sorted and binary-searched
    per consumer interval; partial overlap counts as a dependency.
    """
    dag = TBDependencyDAG()
    for k in graph.kernels:
        for gpu in range(n_gpus):
            for block in k.blocks():
                dag.add_node(k.kernel_id, block, gpu)

    # tensor -> (kernel, gpu) -> sorted [(lo, hi, uid)]
    producers: dict[str, dict[tuple[int, int], list[tuple[int, int, int]]]] = {}
    for k in graph.kernels:
        if not k.outputs:
            continue
        for gpu in range(n_gpus):
            for block in k.blocks():
                uid = dag.uid_of[(k.kernel_id, block, gpu)]
                bind = _bindings(block, gpu)
                for f in k.outputs:
                    lo, hi = f.interval(bind)
                    if hi <= lo:
                        continue
                    producers.setdefault(f.tensor, {}) \
                             .setdefault((k.kernel_id, gpu), []).append((lo, hi, uid))
    for by_source in producers.values():
        for ivals in by_source.values():
            ivals.sort()
            for (lo0, hi0, _), (lo1, _, _) in zip(ivals, ivals[1:]):
                if lo1 < hi0:
                    raise InternalFault(
                        "producer footprints overlap within one kernel instance")

    for k in graph.kernels:
        if not k.inputs:
            continue
        for gpu in range(n_gpus):
            for block in k.blocks():
                uid = dag.uid_of[(k.kernel_id, block, gpu)]
                bind = _bindings(block, gpu)
                for f in k.inputs:
                    qlo, qhi = f.interval(bind)
                    if qhi <= qlo:
                        continue
                    for (src_kernel, _), ivals in producers.get(f.tensor, {}).items():
                        if src_kernel == k.kernel_id:
                            continue
                        starts = [iv[0] for iv in ivals]
                        i = bisect_right(starts, qlo) - 1
                        if i >= 0 and ivals[i][1] <= qlo:
                            i += 1
                        i = max(i, 0)
                        while i < len(ivals) and ivals[i][0] < qhi:
                            dag.add_edge(ivals[i][2], uid)
                            i += 1
    return dag


def check_coverage(graph: OperatorGraph, n_gpus: int) -> None:
    """Every consumer input row must be produced by someone (or be a
    graph source tensor).  Violations mean the workload generator emitted
    an unsatisfiable dependency."""
    produced: dict[str, list[tuple[int, int]]] = {}
    for k in graph.kernels:
        for gpu in range(n_gpus):
            for block in k.blocks():
                bind = _bindings(block, gpu)
                for f in k.outputs:
                    produced.setdefault(f.tensor, []).append(f.interval(bind))
    for tensor, ivals in produced.items():
        ivals.sort()
        merged = []
        for lo, hi in ivals:
            if merged and lo <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
            else:
                merged.append((lo, hi))
        produced[tensor] = merged
    for k in graph.kernels:
        for gpu in range(n_gpus):
            for block in k.blocks():
                bind = _bindings(block, gpu)
                for f in k.inputs:
                    if f.tensor not in produced:
                        continue    # source tensor: assumed resident
                    qlo, qhi = f.interval(bind)
                    covered = any(lo <= qlo and qhi <= hi
                                  for lo, hi in produced[f.tensor])
                    if not covered:
                        raise InternalFault(
                            f"kernel {k.name} block {block} gpu {gpu}: input rows "
                            f"[{qlo}, {qhi}) of '{f.tensor}' are not fully produced")


class DependencyTracker:
    """Readiness state machine for one run.

    fused   — a TB becomes ready when its own producer TBs complete.
    barrier — a TB becomes ready when every producer *kernel* of its kernel
              has fully completed (global barrier, memory effects included;
              completion of a TB is reported by the engine only once its
              reduction writes have landed).
    """

    def __init__(self, dag: TBDependencyDAG, mode: str):
        if mode not in ("fused", "barrier"):
            raise InternalFault(f"unknown scheduling mode '{mode}'")
        self.dag = dag
        self.mode = mode
        self.completed = [False] * len(dag.nodes)
        self.n_complete = 0
        if mode == "fused":
            self.pending = [len(set(d)) for d in dag.deps]
            self._seen: list[set[int]] = [set() for _ in dag.nodes]
        else:
            kernel_deps: dict[int, set[int]] = {}
            kernel_size: dict[int, int] = {}
            self.kernel_of: list[int] = []
            for node in dag.nodes:
                kernel_size[node.kernel] = kernel_size.get(node.kernel, 0) + 1
                self.kernel_of.append(node.kernel)
            for c, ds in enumerate(dag.deps):
                ck = dag.nodes[c].kernel
                for p in ds:
                    pk = dag.nodes[p].kernel
                    if pk != ck:
                        kernel_deps.setdefault(ck, set()).add(pk)
            self.kernel_deps = {k: set(v) for k, v in kernel_deps.items()}
            self.kernel_remaining = kernel_size
            self.kernel_nodes: dict[int, list[int]] = {}
            for node in dag.nodes:
                self.kernel_nodes.setdefault(node.kernel, []).append(node.uid)

    def initial_ready(self) -> list[int]:
        if self.mode == "fused":
            return [u for u, p in enumerate(self.pending) if p == 0]
        ready = []
        for kid, nodes in self.kernel_nodes.items():
            if not self.kernel_deps.get(kid):
                ready.extend(nodes)
        return sorted(ready)

    def complete(self, uid: int) -> list[int]:
        """Mark a TB fully complete; returns newly-ready TB uids."""
        if self.completed[uid]:
            raise InternalFault(f"TB {uid} completed twice")
        self.completed[uid] = True
        self.n_complete += 1
        newly: list[int] = []
        if self.mode == "fused":
            for c in self.dag.dependents[uid]:
                seen = self._seen[c]
                if uid in seen:
                    continue
                seen.add(uid)
                self.pending[c] -= 1
                if self.pending[c] == 0:
                    newly.append(c)
            return newly
        kid = self.kernel_of[uid]
        self.kernel_remaining[kid] -= 1
        if self.kernel_remaining[kid] == 0:
            for ck, deps in self.kernel_deps.items():
                deps.discard(kid)
                if not deps and self.kernel_remaining.get(ck, 0) > 0:
                    newly.extend(self.kernel_nodes[ck])
            self.kernel_deps = {k: v for k, v in self.kernel_deps.items() if v}
        return sorted(newly)

    @property
    def all_complete(self) -> bool:
        return self.n_complete == len(self.dag.nodes)


def partition_sms(kernels, n_sms: int, tb_slots_per_sm: int
                  ) -> tuple[list[int], dict[int, int]]:
    """Split SMs between an upstream-heavy and a downstream-heavy kernel set.

    Returns (slots per class, kernel_id -> class).  The split is a
    *contention quota*, not a hard partition: the scheduler caps a class at
    its share only while the other class has runnable TBs, and hands the
    whole machine to whichever class is alone (a sole ready kernel gets all
    SMs).  With fewer than 2 SMs, or without a complementary pair,
    everything shares one class (serial fallback).  Neutral kernels ride in
    the upstream class: they are cheap local work that fills its bubbles.
    """
    upstream = [k.kernel_id for k in kernels if k.traffic_class() == "upstream"]
    downstream = [k.kernel_id for k in kernels if k.traffic_class() == "downstream"]
    neutral = [k.kernel_id for k in kernels if k.traffic_class() == "neutral"]
    if n_sms < 2 or not upstream or not downstream:
        pool_of = {k.kernel_id: 0 for k in kernels}
        return [n_sms * tb_slots_per_sm], pool_of
    sms_down = n_sms // 2
    sms_up = n_sms - sms_down
    pool_of = {}
    for kid in upstream + neutral:
        pool_of[kid] = 0
    for kid in downstream:
        pool_of[kid] = 1
    return [sms_up * tb_slots_per_sm, sms_down * tb_slots_per_sm], pool_of
