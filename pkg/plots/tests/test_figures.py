"""Rendering: all four kinds, determinism, empty inputs, bad inputs."""

import json

import pytest

from mergeplot.figures import FIGURE_KINDS, PlotSpec, render
from mergeplot.schema import SchemaError

from conftest import UTIL_HEADER


def util_paths(results_tree):
    return tuple(str(results_tree / m / "utilization.csv")
                 for m in ("base", "partial", "full"))


def test_timeseries_writes_vector_and_raster(results_tree, tmp_path):
    out = tmp_path / "figs" / "util.png"
    written = render(PlotSpec("timeseries", util_paths(results_tree), str(out)))
    assert [p.rsplit(".", 1)[1] for p in written] == ["svg", "png"]
    for p in written:
        with open(p, "rb") as fh:
            assert len(fh.read()) > 1000


def test_bars_normalizes_to_barrier(results_tree, tmp_path):
    inputs = tuple(str(results_tree / m / "summary.json")
                   for m in ("barrier", "base", "partial", "full"))
    written = render(PlotSpec("bars", inputs, str(tmp_path / "bars.png")))
    assert len(written) == 2


def test_sensitivity_curves_from_sweep(tmp_path):
    for mode in ("base", "full"):
        for entries in (8, 16, 32, 64):
            d = tmp_path / f"{mode}_entries_per_port={entries}"
            d.mkdir()
            (d / "summary.json").write_text(json.dumps({
                "mode": mode, "workload": "w", "entries_per_port": entries,
                "makespan_ns": 100_000 - entries * (900 if mode == "full" else 300),
            }))
    inputs = tuple(str(p) for p in sorted(tmp_path.glob("*/summary.json")))
    written = render(PlotSpec("sensitivity", inputs, str(tmp_path / "sens.png")))
    assert len(written) == 2


def test_histogram_from_spreads(results_tree, tmp_path):
    inputs = tuple(str(results_tree / m / "spreads.csv")
                   for m in ("barrier", "partial"))
    written = render(PlotSpec("histogram", inputs, str(tmp_path / "h.png")))
    assert len(written) == 2


def test_empty_csv_renders_empty_axes(tmp_path):
    empty = tmp_path / "run" / "utilization.csv"
    empty.parent.mkdir()
    empty.write_text(UTIL_HEADER)
    written = render(PlotSpec("timeseries", (str(empty),),
                              str(tmp_path / "e.png")))
    assert len(written) == 2


def test_rendering_is_deterministic(results_tree, tmp_path):
    spec_a = PlotSpec("timeseries", util_paths(results_tree), str(tmp_path / "a.png"))
    spec_b = PlotSpec("timeseries", util_paths(results_tree), str(tmp_path / "b.png"))
    a_svg, a_png = render(spec_a)
    b_svg, b_png = render(spec_b)
    with open(a_svg, "rb") as fa, open(b_svg, "rb") as fb:
        assert fa.read() == fb.read()
    with open(a_png, "rb") as fa, open(b_png, "rb") as fb:
        assert fa.read() == fb.read()


def test_rendering_does_not_mutate_inputs(results_tree, tmp_path):
    path = results_tree / "full" / "utilization.csv"
    before = path.read_bytes()
    render(PlotSpec("timeseries", (str(path),), str(tmp_path / "f.png")))
    assert path.read_bytes() == before


def test_unknown_kind_rejected():
    with pytest.raises(ValueError, match="unknown figure kind"):
        PlotSpec("pie", ("x.csv",), "y.png").validate()


def test_no_inputs_rejected():
    with pytest.raises(ValueError, match="no input"):
        PlotSpec("bars", (), "y.png").validate()


def test_wrong_schema_fails_loudly(results_tree, tmp_path):
    bad = tmp_path / "spreads.csv"
    bad.write_text("a,b\r\n1,2\r\n")
    with pytest.raises(SchemaError, match="expected columns"):
        render(PlotSpec("histogram", (str(bad),), str(tmp_path / "h.png")))


def test_all_kinds_covered():
    assert set(FIGURE_KINDS) == {"timeseries", "bars", "sensitivity", "histogram"}
