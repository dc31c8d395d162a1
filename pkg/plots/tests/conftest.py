import json

import pytest

UTIL_HEADER = "time_ns,link_id,direction,utilization\r\n"
SPREAD_HEADER = "addr,kind,first_ns,last_ns,spread_ns,requesters\r\n"


def _summary(mode, workload="l2_proj", makespan=50_000, entries=320):
    return {
        "mode": mode,
        "workload": workload,
        "makespan_ns": makespan,
        "entries_per_port": entries,
        "seed": 0,
    }


@pytest.fixture
def results_tree(tmp_path):
    """A miniature copy of the simulator's --out layout, four modes."""
    root = tmp_path / "results"
    makespans = {"barrier": 80_000, "base": 72_000,
                 "partial": 60_000, "full": 52_000}
    for mode, mk in makespans.items():
        d = root / mode
        d.mkdir(parents=True)
        (d / "summary.json").write_text(
            json.dumps(_summary(mode, makespan=mk), indent=2))
        rows = "".join(f"{t},0,up,0.{(hash((mode, t)) % 90) + 10:02d}0000\r\n"
                       f"{t},0,down,0.{(hash((t, mode)) % 90) + 10:02d}0000\r\n"
                       for t in range(0, 5000, 1000))
        (d / "utilization.csv").write_text(UTIL_HEADER + rows)
        spreads = "".join(
            f"{4096 + 128 * i},reduction,0,{(i * 37) % 3000},{(i * 37) % 3000},3\r\n"
            for i in range(50))
        (d / "spreads.csv").write_text(SPREAD_HEADER + spreads)
    return root
