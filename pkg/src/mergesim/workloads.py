"""Workload generation: model presets, sub-layer chains, synthetic traffic.

The interesting communication in tensor-parallel transformer layers sits
at four sub-layer boundaries, all with the same shape: a GEMM whose
partial outputs reduce-scatter across GPUs, a row-local normalization,
then a GEMM that all-gathers its activation input:

    L1  output-projection GEMM -> LN -> first FFN GEMM        (forward)
    L2  second FFN GEMM        -> LN -> QKV-projection GEMM   (forward)
    L3  first-FFN backward     -> LN -> output-proj backward  (backward)
    L4  QKV backward           -> LN -> second-FFN backward   (backward)

Kernels are SPMD over GPUs and tiled 128x128.  The reduce-scatter GEMM's
grid is (row_tile, col_tile) and each TB pushes its output tile to the
row's home GPU as reduction writes.  The all-gather GEMM is decomposed
split-K style — grid (row_tile, k_tile) — so each TB pulls a *distinct*
128-row by 128-column slice of the gathered activation; that keeps every
block's footprint disjoint and gives one merge session per burst with
exactly tp-1 remote requesters.

Communication tensors are stored tile-major: each 128x128 tile is one
contiguous 32 KiB block, tiles laid out row-tile-major.  A TB's traffic
is then a contiguous run of 128 B lines, which the address-interleaved
switch routing spreads evenly across all switches.  (A row-major layout
would alias every line of a tile column onto one switch, since row
strides are multiples of the interleave period.)

Dependency footprints are declared in abstract "cell" units (row-tile
major, one cell per 128x128 tile) so producer intervals stay disjoint
within a kernel instance.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .coordination import IndexExpr
from .dataflow import (FootprintTemplate, KernelSpec, MemOpTemplate,
                       OperatorGraph, check_coverage)
from .errors import ConfigError
from .gpu_model import AddressMap

TILE = 128
SUBLAYERS = ("L1", "L2", "L3", "L4")


@dataclass(frozen=True)
class FeatureSet:
    fused_scheduling: bool
    coordination: bool
    sm_overlap: bool
    vc_classes: bool

    def as_set(self) -> frozenset:
        return frozenset(name for name, on in [
            ("fused_scheduling", self.fused_scheduling),
            ("coordination", self.coordination),
            ("sm_overlap", self.sm_overlap),
            ("vc_classes", self.vc_classes)] if on)


class ExecMode(str, Enum):
    """Execution tiers; each tier's feature set strictly contains the last."""

    BARRIER = "barrier"     # kernel-level barriers, collectives as phases
    BASE = "base"           # + fused TB-level scheduling with merging
    PARTIAL = "partial"     # + cross-GPU coordination and SM overlap
    FULL = "full"           # + VC class separation for load/reduction traffic

    def features(self) -> FeatureSet:
        return _MODE_FEATURES[self]


_MODE_FEATURES = {
    ExecMode.BARRIER: FeatureSet(False, False, False, False),
    ExecMode.BASE: FeatureSet(True, False, False, False),
    ExecMode.PARTIAL: FeatureSet(True, True, True, False),
    ExecMode.FULL: FeatureSet(True, True, True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    name: str
    hidden: int
    ffn: int
    n_heads: int
    seq_len: int
    batch: int

    @property
    def rows(self) -> int:
        return self.seq_len * self.batch


MODEL_PRESETS = {
    "mega-gpt-4b": ModelConfig("mega-gpt-4b", hidden=2048, ffn=8192, n_heads=24,
                               seq_len=1024, batch=16),
    "mega-gpt-8b": ModelConfig("mega-gpt-8b", hidden=3072, ffn=12288, n_heads=32,
                               seq_len=1024, batch=12),
    "llama-7b": ModelConfig("llama-7b", hidden=4096, ffn=11264, n_heads=32,
                            seq_len=3072, batch=3),
    # Half-scale twin of mega-gpt-4b: same shapes at half the model width,
    # sized so a full four-mode comparison runs in seconds on one core.
    "mega-gpt-4b-half": ModelConfig("mega-gpt-4b-half", hidden=1024, ffn=4096,
                                    n_heads=12, seq_len=1024, batch=8),
}


@dataclass(frozen=True)
class TensorLayout:
    """Global tensor sharded over GPUs along its ``rows`` axis.

    ``rows`` is whatever unit the generator shards by (tile-rows for the
    tile-major GEMM tensors, 128 B lines for the synthetic ones); each row
    is ``row_bytes`` contiguous bytes.
    """

    name: str
    base: int
    rows: int
    row_bytes: int
    n_gpus: int

    @property
    def rows_per_gpu(self) -> int:
        return self.rows // self.n_gpus

    def regions(self) -> list[tuple[int, int, int]]:
        rpg_bytes = self.rows_per_gpu * self.row_bytes
        return [(self.base + g * rpg_bytes, self.base + (g + 1) * rpg_bytes, g)
                for g in range(self.n_gpus)]

    def addr(self, row: int, byte_off: int = 0) -> int:
        return self.base + row * self.row_bytes + byte_off


@dataclass
class Workload:
    name: str
    n_gpus: int
    graph: OperatorGraph
    address_map: AddressMap
    layouts: dict[str, TensorLayout]
    elem_bytes: int = 2
    preinit_tensors: tuple[str, ...] = ()    # filled with values before t=0

    def validate(self, n_gpus: int) -> None:
        if self.n_gpus != n_gpus:
            raise ConfigError("workload.n_gpus",
                              f"workload built for {self.n_gpus} GPUs, topology has {n_gpus}")
        check_coverage(self.graph, self.n_gpus)


_TENSOR_SPACING = 1 << 40


def _layout(name: str, index: int, rows: int, row_bytes: int, n_gpus: int) -> TensorLayout:
    return TensorLayout(name, base=index * _TENSOR_SPACING, rows=rows,
                        row_bytes=row_bytes, n_gpus=n_gpus)


def _sublayer_dims(model: ModelConfig, layer: str, tp: int) -> tuple[int, int]:
    """(K of the reduce-scatter GEMM, N of the all-gather GEMM)."""
    h, f = model.hidden, model.ffn
    try:
        return {
            "L1": (h // tp, f // tp),
            "L2": (f // tp, 3 * h // tp),
            "L3": (f // tp, h // tp),
            "L4": (3 * h // tp, f // tp),
        }[layer]
    except KeyError:
        raise ConfigError("sublayer", f"unknown sub-layer '{layer}', "
                          f"expected one of {SUBLAYERS}") from None


_LN_FLOPS_PER_ELEM = 8


def _validate_dims(model: ModelConfig, tp: int, k1: int, n2: int) -> None:
    if model.rows % (tp * TILE):
        raise ConfigError("model.seq_len",
                          f"rows ({model.rows}) must divide evenly into "
                          f"{TILE}-row tiles per GPU at tp={tp}")
    if model.hidden % TILE or model.hidden % tp:
        raise ConfigError("model.hidden",
                          f"hidden ({model.hidden}) must be a multiple of {TILE} and tp")
    for nm, v in (("gemm K", k1), ("gemm N", n2)):
        if v % TILE:
            raise ConfigError("model", f"{nm} ({v}) must be a multiple of {TILE}")


def gen_sublayer(model: ModelConfig, layer: str, n_gpus: int,
                 elem_bytes: int = 2) -> Workload:
    """Reduce-scatter GEMM -> LN -> all-gather GEMM chain for one sub-layer."""
    tp = n_gpus
    k1, n2 = _sublayer_dims(model, layer, tp)
    _validate_dims(model, tp, k1, n2)
    h = model.hidden
    rows = model.rows
    row_tiles = rows // TILE
    col_tiles = h // TILE
    tiles_per_gpu = row_tiles // tp
    tile_bytes = TILE * TILE * elem_bytes
    trow_bytes = col_tiles * tile_bytes        # one tile-row, contiguous

    rs_out = _layout("rs_out", 1, row_tiles, trow_bytes, n_gpus)
    ln_out = _layout("ln_out", 2, row_tiles, trow_bytes, n_gpus)

    bx, by, gpu = IndexExpr.var("bx"), IndexExpr.var("by"), IndexExpr.var("gpu")

    # Reduce-scatter GEMM: one reduction write of its 128x128 output tile.
    gemm_rs = KernelSpec(
        kernel_id=0, name=f"{layer}.gemm_rs", grid=(row_tiles, col_tiles),
        flops_per_tb=2.0 * TILE * TILE * k1,
        local_bytes_per_tb=float(tile_bytes),
        mem_ops=(MemOpTemplate(
            is_reduction=True,
            base_expr=bx.scaled(trow_bytes) + by.scaled(tile_bytes) + rs_out.base,
            rows=1, row_stride=tile_bytes, row_bytes=tile_bytes), ),
        outputs=(FootprintTemplate("rs_out", bx.scaled(col_tiles) + by, 1), ),
    )

    # Row-local normalization over the GPU's shard, tiled 128x128.
    ln = KernelSpec(
        kernel_id=1, name=f"{layer}.ln", grid=(tiles_per_gpu, col_tiles),
        flops_per_tb=float(_LN_FLOPS_PER_ELEM * TILE * TILE),
        local_bytes_per_tb=float(2 * tile_bytes),
        inputs=(FootprintTemplate(
            "rs_out", gpu.scaled(tiles_per_gpu * col_tiles) + bx.scaled(col_tiles) + by, 1), ),
        outputs=(FootprintTemplate(
            "ln_out", gpu.scaled(tiles_per_gpu * col_tiles) + bx.scaled(col_tiles) + by, 1), ),
    )

    # All-gather GEMM, split-K: block (bx, by) pulls one 128x128 tile of
    # the gathered activation and accumulates its K-slice locally.
    ag_gemm = KernelSpec(
        kernel_id=2, name=f"{layer}.ag_gemm", grid=(row_tiles, col_tiles),
        flops_per_tb=2.0 * TILE * n2 * TILE,
        local_bytes_per_tb=float(TILE * n2 * elem_bytes),
        mem_ops=(MemOpTemplate(
            is_reduction=False,
            base_expr=bx.scaled(trow_bytes) + by.scaled(tile_bytes) + ln_out.base,
            rows=1, row_stride=tile_bytes, row_bytes=tile_bytes), ),
        inputs=(FootprintTemplate("ln_out", bx.scaled(col_tiles) + by, 1), ),
    )

    graph = OperatorGraph((gemm_rs, ln, ag_gemm))
    layouts = {"rs_out": rs_out, "ln_out": ln_out}
    amap = AddressMap(rs_out.regions() + ln_out.regions())
    return Workload(f"{model.name}.{layer}", n_gpus, graph, amap, layouts,
                    elem_bytes)


def gen_basic_tp(model: ModelConfig, n_gpus: int, elem_bytes: int = 2) -> Workload:
    """Plain tensor-parallel pair: GEMM with all-reduce, then the next GEMM.

    The all-reduce is expressed as reduction writes to the row's home plus
    gathered reads by every consumer block — same volume as reduce-scatter
    followed by all-gather on the same tensor.
    """
    tp = n_gpus
    h = model.hidden
    k1 = h // tp
    _validate_dims(model, tp, k1, h // tp)
    row_tiles = model.rows // TILE
    col_tiles = h // TILE
    tile_bytes = TILE * TILE * elem_bytes
    trow_bytes = col_tiles * tile_bytes

    ar_buf = _layout("ar_buf", 1, row_tiles, trow_bytes, n_gpus)
    bx, by = IndexExpr.var("bx"), IndexExpr.var("by")

    gemm_ar = KernelSpec(
        kernel_id=0, name="tp.gemm_ar", grid=(row_tiles, col_tiles),
        flops_per_tb=2.0 * TILE * TILE * k1,
        local_bytes_per_tb=float(tile_bytes),
        mem_ops=(MemOpTemplate(
            is_reduction=True,
            base_expr=bx.scaled(trow_bytes) + by.scaled(tile_bytes) + ar_buf.base,
            rows=1, row_stride=tile_bytes, row_bytes=tile_bytes), ),
        outputs=(FootprintTemplate("ar_buf", bx.scaled(col_tiles) + by, 1), ),
    )
    gemm_next = KernelSpec(
        kernel_id=1, name="tp.gemm_next", grid=(row_tiles, col_tiles),
        flops_per_tb=2.0 * TILE * (h // tp) * TILE,
        local_bytes_per_tb=float(TILE * (h // tp) * elem_bytes),
        mem_ops=(MemOpTemplate(
            is_reduction=False,
            base_expr=bx.scaled(trow_bytes) + by.scaled(tile_bytes) + ar_buf.base,
            rows=1, row_stride=tile_bytes, row_bytes=tile_bytes), ),
        inputs=(FootprintTemplate("ar_buf", bx.scaled(col_tiles) + by, 1), ),
    )
    graph = OperatorGraph((gemm_ar, gemm_next))
    amap = AddressMap(ar_buf.regions())
    return Workload(f"{model.name}.basic_tp", n_gpus, graph, amap,
                    {"ar_buf": ar_buf}, elem_bytes)


# ---------------------------------------------------------------------------
# Synthetic workloads for unit tests, acceptance checks and fuzzing.
# ---------------------------------------------------------------------------

def pure_phase_workload(kind: str, n_gpus: int, tiles_per_gpu: int = 2,
                        bursts_per_row: int = 1, compute_ns_hint: float = 1000.0
                        ) -> Workload:
    """Single-kernel workload that is purely reductions or purely loads.

    Each block touches one 128-row tile of a row-sharded tensor, each row
    being ``bursts_per_row`` 128 B bursts.  Every GPU runs every block, so
    each burst sees exactly n_gpus-1 remote requesters.
    """
    if kind not in ("reduction", "load"):
        raise ConfigError("workload.kind", f"unknown pure phase '{kind}'")
    rows = n_gpus * tiles_per_gpu * TILE
    row_bytes = bursts_per_row * 128
    t = _layout("phase_buf", 1, rows, row_bytes, n_gpus)
    bx = IndexExpr.var("bx")
    op = MemOpTemplate(
        is_reduction=(kind == "reduction"),
        base_expr=bx.scaled(TILE * row_bytes) + t.base,
        rows=TILE, row_stride=row_bytes, row_bytes=row_bytes)
    kernel = KernelSpec(
        kernel_id=0, name=f"pure_{kind}", grid=(rows // TILE,),
        flops_per_tb=compute_ns_hint, local_bytes_per_tb=0.0,
        mem_ops=(op,),
        outputs=(FootprintTemplate("phase_buf", bx, 1),) if kind == "reduction" else (),
    )
    graph = OperatorGraph((kernel,))
    preinit = ("phase_buf",) if kind == "load" else ()
    return Workload(f"pure_{kind}", n_gpus, graph, AddressMap(t.regions()),
                    {"phase_buf": t}, preinit_tensors=preinit)


def two_phase_workload(n_gpus: int, tiles_per_gpu: int = 1) -> Workload:
    """Reduction kernel and load kernel over disjoint tensors, no deps.

    Used for oracle-equivalence runs: load targets are pre-initialized and
    never concurrently reduced, so delivered values are timing-independent.
    """
    rows = n_gpus * tiles_per_gpu * TILE
    red_t = _layout("red_buf", 1, rows, 128, n_gpus)
    load_t = _layout("load_buf", 2, rows, 128, n_gpus)
    bx = IndexExpr.var("bx")
    red_k = KernelSpec(
        kernel_id=0, name="phase_red", grid=(rows // TILE,),
        flops_per_tb=500.0, local_bytes_per_tb=0.0,
        mem_ops=(MemOpTemplate(True, bx.scaled(TILE * 128) + red_t.base,
                               TILE, 128, 128),),
        outputs=(FootprintTemplate("red_buf", bx, 1),))
    load_k = KernelSpec(
        kernel_id=1, name="phase_load", grid=(rows // TILE,),
        flops_per_tb=500.0, local_bytes_per_tb=0.0,
        mem_ops=(MemOpTemplate(False, bx.scaled(TILE * 128) + load_t.base,
                               TILE, 128, 128),),
        inputs=(FootprintTemplate("load_buf", bx, 1),))
    graph = OperatorGraph((red_k, load_k))
    amap = AddressMap(red_t.regions() + load_t.regions())
    return Workload("two_phase", n_gpus, graph, amap,
                    {"red_buf": red_t, "load_buf": load_t},
                    preinit_tensors=("load_buf",))


def fuzz_workload(seed: int, n_gpus: int, burst_rows: int = TILE) -> Workload:
    """Small randomized mixed workload for forward-progress fuzzing.

    ``burst_rows`` caps how many 128 B rows of its tile each block touches;
    shrinking it keeps the block/tile structure while cutting traffic, which
    is what makes thousand-seed fuzz sweeps affordable.
    """
    rng = random.Random(seed)
    tiles_per_gpu = rng.randint(1, 2)
    rows = n_gpus * tiles_per_gpu * TILE
    n_kernels = rng.randint(1, 3)
    kernels = []
    layouts = {}
    regions = []
    bx = IndexExpr.var("bx")
    preinit = []
    for kid in range(n_kernels):
        name = f"fuzz_t{kid}"
        t = _layout(name, kid + 1, rows, 128, n_gpus)
        layouts[name] = t
        regions.extend(t.regions())
        is_red = rng.random() < 0.5
        kernels.append(KernelSpec(
            kernel_id=kid, name=f"fuzz_k{kid}", grid=(rows // TILE,),
            flops_per_tb=float(rng.randint(100, 5000)), local_bytes_per_tb=0.0,
            mem_ops=(MemOpTemplate(is_red, bx.scaled(TILE * 128) + t.base,
                                   min(burst_rows, TILE), 128, 128),),
            outputs=(FootprintTemplate(name, bx, 1),) if is_red else ()))
        if not is_red:
            preinit.append(name)
    graph = OperatorGraph(tuple(kernels))
    return Workload(f"fuzz_{seed}", n_gpus, graph, AddressMap(regions), layouts,
                    preinit_tensors=tuple(preinit))


def oracle_workload(seed: int, n_gpus: int, max_bursts: int = 64) -> Workload:
    """Burst-granularity randomized instance for value-correctness checks.

    At most ``max_bursts`` distinct 128 B bursts exist across all tensors,
    each touched by exactly one block per kernel, and every GPU runs every
    block.  A reduction burst therefore collects exactly one contribution
    per GPU and a load burst is delivered once to each non-home GPU, so the
    expected final state is a closed-form function of the value seeds.
    """
    rng = random.Random(seed)
    n_kernels = rng.randint(1, 3)
    budget = max_bursts
    kernels = []
    layouts = {}
    regions = []
    preinit = []
    bx = IndexExpr.var("bx")
    for kid in range(n_kernels):
        cap = budget // ((n_kernels - kid) * n_gpus)
        if cap < 1:
            break
        per_gpu = rng.randint(1, min(4, cap))
        rows = per_gpu * n_gpus
        budget -= rows
        name = f"oracle_t{kid}"
        t = _layout(name, kid + 1, rows, 128, n_gpus)
        layouts[name] = t
        regions.extend(t.regions())
        is_red = rng.random() < 0.5
        kernels.append(KernelSpec(
            kernel_id=kid, name=f"oracle_k{kid}", grid=(rows,),
            flops_per_tb=float(rng.randint(50, 3000)), local_bytes_per_tb=0.0,
            mem_ops=(MemOpTemplate(is_red, bx.scaled(128) + t.base,
                                   1, 128, 128),),
            outputs=(FootprintTemplate(name, bx, 1),) if is_red else ()))
        if not is_red:
            preinit.append(name)
    graph = OperatorGraph(tuple(kernels))
    return Workload(f"oracle_{seed}", n_gpus, graph, AddressMap(regions),
                    layouts, preinit_tensors=tuple(preinit))


def random_dag_workload(seed: int, n_gpus: int = 2) -> Workload:
    """Random small kernel chain with a mix of local and remote stages.

    The producer/consumer tile mappings vary with the seed; coverage is
    guaranteed by construction (consumers read tiles the producer wrote).
    Used by the fused-vs-barrier scheduling property.
    """
    rng = random.Random(seed)
    tiles_per_gpu = rng.randint(1, 3)
    row_tiles = n_gpus * tiles_per_gpu
    rows = row_tiles * TILE
    depth = rng.randint(2, 4)
    kernels = []
    layouts = {}
    regions = []
    bx, gpu = IndexExpr.var("bx"), IndexExpr.var("gpu")
    prev_tensor: Optional[str] = None
    for kid in range(depth):
        style = rng.choice(["reduce", "gather", "local"]) if kid else \
            rng.choice(["reduce", "local"])
        tname = f"t{kid}"
        t = _layout(tname, kid + 1, rows, 128, n_gpus)
        layouts[tname] = t
        regions.extend(t.regions())
        inputs = ()
        if prev_tensor is not None:
            if style == "local":
                # Shard-local kernel: block bx handles the gpu's own tile.
                inputs = (FootprintTemplate(
                    prev_tensor, gpu.scaled(tiles_per_gpu) + bx.scaled(1), 1),)
            else:
                # Full-grid kernel: block bx touches global tile bx.
                inputs = (FootprintTemplate(prev_tensor, bx, 1),)
        if style == "reduce":
            grid = (row_tiles,)
            mem = (MemOpTemplate(True, bx.scaled(TILE * 128) + t.base,
                                 TILE, 128, 128),)
            outputs = (FootprintTemplate(tname, bx, 1),)
        elif style == "gather":
            grid = (row_tiles,)
            mem = (MemOpTemplate(False, bx.scaled(TILE * 128) + layouts[prev_tensor].base,
                                 TILE, 128, 128),)
            outputs = (FootprintTemplate(
                tname, gpu.scaled(0) + bx.scaled(1), 1),)   # local result rows
        else:  # local
            grid = (tiles_per_gpu,)
            mem = ()
            outputs = (FootprintTemplate(
                tname, gpu.scaled(tiles_per_gpu) + bx.scaled(1), 1),)
        kernels.append(KernelSpec(
            kernel_id=kid, name=f"k{kid}_{style}", grid=grid,
            flops_per_tb=float(rng.randint(200, 4000)),
            local_bytes_per_tb=float(rng.choice([0, 16384, 65536])),
            mem_ops=mem, inputs=inputs, outputs=outputs))
        prev_tensor = tname
    graph = OperatorGraph(tuple(kernels))
    return Workload(f"rand_dag_{seed}", n_gpus, graph, AddressMap(regions),
                    layouts)
