"""Grouping pass, sync table, throttle hysteresis."""

import pytest

from mergesim.coordination import (
    PHASE_PREACCESS,
    PHASE_PRELAUNCH,
    GpuSynchronizer,
    GroupSyncTable,
    IndexExpr,
    ThrottleConfig,
    ThrottleController,
    group_tbs,
    sync_home_switch,
)
from mergesim.dataflow import KernelSpec, MemOpTemplate
from mergesim.errors import ProtocolFault


def red_kernel(kid=0, grid=(2, 2), base=None):
    base = base or (IndexExpr.var("bx", 4096) + IndexExpr.var("by", 256))
    op = MemOpTemplate(is_reduction=True, base_expr=base, rows=1,
                       row_stride=0, row_bytes=128)
    return KernelSpec(kernel_id=kid, name="k", grid=grid, flops_per_tb=0,
                      local_bytes_per_tb=0, mem_ops=(op,))


# --- index expressions ------------------------------------------------------

def test_expr_evaluate_and_add():
    e = IndexExpr.var("bx", 8) + IndexExpr.constant(100)
    assert e.evaluate({"bx": 3}) == 124
    assert (e + 5).evaluate({"bx": 0}) == 105
    assert e.scaled(2).evaluate({"bx": 3}) == 248


def test_expr_zero_coefficients_vanish():
    e = IndexExpr({"gpu": 1}) + IndexExpr({"gpu": -1})
    assert e.gpu_invariant


def test_expr_unbound_variable_faults():
    with pytest.raises(ProtocolFault):
        IndexExpr.var("bz").evaluate({"bx": 0})


def test_gpu_invariance_detection():
    assert IndexExpr.var("bx").gpu_invariant
    assert not (IndexExpr.var("bx") + IndexExpr.var("gpu", 64)).gpu_invariant


# --- grouping ----------------------------------------------------------------

def test_invariant_kernel_gets_one_group_per_block():
    res = group_tbs([red_kernel(grid=(2, 3))], n_gpus=4)
    assert len(res.groups) == 6
    assert res.mergeable_kernels == {0}
    assert all(g.n_members == 4 for g in res.groups)
    assert res.gid(0, (1, 2)) >= 0
    assert res.gid(0, (9, 9)) == -1


def test_gpu_dependent_kernel_is_ungrouped():
    base = IndexExpr.var("bx", 4096) + IndexExpr.var("gpu", 1 << 20)
    res = group_tbs([red_kernel(base=base)], n_gpus=4)
    assert res.groups == [] and res.mergeable_kernels == set()


def test_local_only_kernel_is_ignored():
    k = KernelSpec(kernel_id=0, name="ln", grid=(2,), flops_per_tb=10,
                   local_bytes_per_tb=10, mem_ops=())
    res = group_tbs([k], n_gpus=4)
    assert res.groups == []


def test_sync_home_switch_is_stable_modulo_placement():
    assert [sync_home_switch(g, 4) for g in range(6)] == [0, 1, 2, 3, 0, 1]


# --- sync table -------------------------------------------------------------

def test_release_fires_exactly_on_last_member():
    t = GroupSyncTable(0)
    assert t.register(7, PHASE_PRELAUNCH, gpu=0, expected=3, now=10) is None
    assert t.register(7, PHASE_PRELAUNCH, gpu=2, expected=3, now=20) is None
    assert t.register(7, PHASE_PRELAUNCH, gpu=1, expected=3, now=35) == [0, 1, 2]
    assert t.registers == 3 and t.releases == 3


def test_timeline_records_first_last_release():
    t = GroupSyncTable(0)
    t.register(7, PHASE_PREACCESS, gpu=0, expected=2, now=10)
    t.register(7, PHASE_PREACCESS, gpu=1, expected=2, now=42)
    assert t.timeline[(7, PHASE_PREACCESS)] == [10, 42, 42]


def test_same_group_runs_both_phases_independently():
    t = GroupSyncTable(0)
    t.register(7, PHASE_PRELAUNCH, gpu=0, expected=2, now=0)
    t.register(7, PHASE_PREACCESS, gpu=1, expected=2, now=1)
    assert t.register(7, PHASE_PRELAUNCH, gpu=1, expected=2, now=2) == [0, 1]
    assert t.register(7, PHASE_PREACCESS, gpu=0, expected=2, now=3) == [0, 1]


def test_phase_reuse_after_release_starts_fresh():
    t = GroupSyncTable(0)
    t.register(7, PHASE_PRELAUNCH, gpu=0, expected=2, now=0)
    t.register(7, PHASE_PRELAUNCH, gpu=1, expected=2, now=1)
    assert t.register(7, PHASE_PRELAUNCH, gpu=0, expected=2, now=2) is None


def test_duplicate_registration_faults():
    t = GroupSyncTable(0)
    t.register(7, PHASE_PRELAUNCH, gpu=0, expected=3, now=0)
    with pytest.raises(ProtocolFault):
        t.register(7, PHASE_PRELAUNCH, gpu=0, expected=3, now=1)


def test_synchronizer_park_release_roundtrip():
    s = GpuSynchronizer(0)
    s.park(7, PHASE_PRELAUNCH, tb_uid=99)
    assert s.on_release(7, PHASE_PRELAUNCH) == 99
    with pytest.raises(ProtocolFault):
        s.on_release(7, PHASE_PRELAUNCH)


# --- throttle hysteresis -----------------------------------------------------

def test_throttle_edges_at_threshold_and_half():
    ctl = ThrottleController(ThrottleConfig(lead_threshold=8), n_gpus=2)
    edges = [ctl.update(0, g, +1) for g in range(9)]
    assert edges[:8] == [None] * 8 and edges[8] is True      # lead 9 > 8
    downs = [ctl.update(0, g, -1) for g in range(6)]
    assert downs[:5] == [None] * 5 and downs[5] is False     # lead 3 < 4
    assert ctl.lead(0) == 3
    assert ctl.on_edges == 1 and ctl.off_edges == 1


def test_no_flapping_inside_hysteresis_band():
    ctl = ThrottleController(ThrottleConfig(lead_threshold=8), n_gpus=1)
    for g in range(9):
        ctl.update(0, g, +1)
    # Oscillate between 8 and 9: still throttled, no new edges.
    assert ctl.update(0, 8, -1) is None
    assert ctl.update(0, 8, +1) is None
    assert ctl.on_edges == 1 and ctl.off_edges == 0


def test_leads_tracked_per_gpu():
    ctl = ThrottleController(ThrottleConfig(lead_threshold=2), n_gpus=2)
    assert ctl.update(0, 0, +1) is None
    assert ctl.update(1, 0, +1) is None
    ctl.update(0, 1, +1)
    assert ctl.update(0, 2, +1) is True
    assert ctl.active == [True, False]


def test_lead_counts_groups_not_sessions():
    # Sixty-four open sessions all belonging to one thread-block group are a
    # single unit of "ahead": a wide access must not look like runaway skew.
    ctl = ThrottleController(ThrottleConfig(lead_threshold=2), n_gpus=1)
    for _ in range(64):
        assert ctl.update(0, 5, +1) is None
    assert ctl.lead(0) == 1
    for _ in range(63):
        assert ctl.update(0, 5, -1) is None
    assert ctl.lead(0) == 1
    assert ctl.update(0, 5, -1) is None
    assert ctl.lead(0) == 0
    assert ctl.on_edges == 0


def test_negative_lead_faults():
    ctl = ThrottleController(ThrottleConfig(), n_gpus=1)
    with pytest.raises(ProtocolFault):
        ctl.update(0, 0, -1)


def test_resume_threshold_floor():
    assert ThrottleConfig(lead_threshold=1).resume_below == 1
    assert ThrottleConfig(lead_threshold=8).resume_below == 4
