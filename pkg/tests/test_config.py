"""Config parsing: unknown-key rejection, defaults, workload building."""

import pytest

from mergesim.config import (build_workload, example_config, load_config,
                             parse_config)
from mergesim.errors import ConfigError
from mergesim.workloads import ExecMode


def test_example_config_parses():
    cfg, wl_spec = parse_config(example_config())
    assert cfg.mode == ExecMode.FULL
    assert cfg.n_gpus == 8 and cfg.n_switches == 4
    assert wl_spec["layer"] == "L1"


def test_defaults_fill_missing_sections():
    cfg, _ = parse_config({"workload": {"kind": "two_phase"}, "n_gpus": 4})
    assert cfg.entries_per_port == 320
    assert cfg.merge_timeout_ns == 10_000
    assert cfg.link_latency_ns == 250
    assert cfg.lead_threshold == 8
    assert cfg.value_dtype == "int64"


@pytest.mark.parametrize("doc,field", [
    ({"workloads": {}}, "workloads"),
    ({"fabric": {"latency": 1}}, "fabric.latency"),
    ({"merge": {"entries": 8}}, "merge.entries"),
    ({"workload": {"kind": "pure", "rows": 4}}, "workload.rows"),
    ({"compute": {"sms": 4}}, "compute"),
])
def test_unknown_keys_name_the_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert field.split(".")[-1] in str(exc.value)


@pytest.mark.parametrize("doc,field", [
    ({"mode": "turbo"}, "mode"),
    ({"n_gpus": "eight"}, "n_gpus"),
    ({"n_gpus": 1}, "n_gpus"),
    ({"merge": {"enabled": 1}}, "merge.enabled"),
    ({"workload": {"kind": "sublayer", "layer": "L7"}}, "workload.layer"),
    ({"workload": {"kind": "sublayer", "model": "gpt-99"}}, "workload.model"),
    ({"workload": {"kind": "sublayer", "batch": 0}}, "workload.batch"),
    ({"workload": {"kind": "mystery"}}, "workload.kind"),
    ({"trace_link_ids": [1, "x"]}, "trace_link_ids"),
])
def test_bad_values_name_the_field(doc, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert str(exc.value.field) == field


def test_batch_override_scales_rows():
    wl1 = build_workload({"kind": "sublayer", "layer": "L1", "batch": 1}, 8)
    wl2 = build_workload({"kind": "sublayer", "layer": "L1", "batch": 2}, 8)
    k1 = wl1.graph.kernels[0]
    k2 = wl2.graph.kernels[0]
    assert k2.grid[0] == 2 * k1.grid[0]


def test_workload_kinds_all_buildable():
    for spec in ({"kind": "pure", "phase": "load"},
                 {"kind": "pure", "phase": "reduction", "tiles_per_gpu": 1},
                 {"kind": "two_phase"},
                 {"kind": "fuzz", "seed": 3},
                 {"kind": "random_dag", "seed": 5},
                 {"kind": "basic_tp", "model": "mega-gpt-4b", "batch": 1}):
        wl = build_workload(spec, 4)
        wl.validate(4)


def test_load_config_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/path.json")


def test_load_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_config_root_must_be_object(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(p))
