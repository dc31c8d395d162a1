"""Experiment configuration: JSON schema, validation, workload construction.

The config file is one JSON object.  Unknown keys are rejected (they are
almost always typos) and every validation error names the offending field.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any

from .errors import ConfigError
from .gpu_model import ComputeConfig
from .runner import ExperimentConfig
from .workloads import (MODEL_PRESETS, SUBLAYERS, ExecMode, ModelConfig,
                        Workload, fuzz_workload, gen_basic_tp, gen_sublayer,
                        pure_phase_workload, random_dag_workload,
                        two_phase_workload)

_TOP_KEYS = {"name", "workload", "n_gpus", "n_switches", "mode", "fabric",
             "merge", "coordination", "compute", "values", "seed",
             "hash_events", "trace_link_ids", "max_events", "sim_time_limit_ns"}
_FABRIC_KEYS = {"link_bandwidth_bytes_per_us", "link_latency_ns",
                "interleave_bytes"}
_MERGE_KEYS = {"enabled", "entries_per_port", "timeout_ns"}
_COORD_KEYS = {"lead_threshold"}
_VALUE_KEYS = {"track", "dtype", "width"}
_COMPUTE_KEYS = {f.name for f in dataclasses.fields(ComputeConfig)}
_WORKLOAD_KEYS = {"kind", "model", "layer", "batch", "phase", "tiles_per_gpu",
                  "bursts_per_row", "elem_bytes", "seed"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}" if where else key,
                              f"unknown key (allowed: {sorted(allowed)})")


def _expect(section: dict, key: str, types, where: str, default=None):
    if key not in section:
        return default
    val = section[key]
    if not isinstance(val, types) or isinstance(val, bool) and bool not in (
            types if isinstance(types, tuple) else (types,)):
        tname = getattr(types, "__name__", str(types))
        raise ConfigError(f"{where}.{key}" if where else key,
                          f"expected {tname}, got {type(val).__name__}")
    return val


def _model_from(spec: dict) -> ModelConfig:
    name = _expect(spec, "model", str, "workload", default="mega-gpt-4b")
    if name not in MODEL_PRESETS:
        raise ConfigError("workload.model",
                          f"unknown model '{name}' (presets: {sorted(MODEL_PRESETS)})")
    model = MODEL_PRESETS[name]
    batch = _expect(spec, "batch", int, "workload")
    if batch is not None:
        if batch < 1:
            raise ConfigError("workload.batch", "must be >= 1")
        model = dataclasses.replace(model, batch=batch)
    return model


def build_workload(spec: dict, n_gpus: int) -> Workload:
    if not isinstance(spec, dict):
        raise ConfigError("workload", "must be an object")
    _reject_unknown(spec, _WORKLOAD_KEYS, "workload")
    kind = _expect(spec, "kind", str, "workload", default="sublayer")
    elem = _expect(spec, "elem_bytes", int, "workload", default=2)
    if kind == "sublayer":
        layer = _expect(spec, "layer", str, "workload", default="L1")
        if layer not in SUBLAYERS:
            raise ConfigError("workload.layer",
                              f"unknown sub-layer '{layer}' (one of {SUBLAYERS})")
        return gen_sublayer(_model_from(spec), layer, n_gpus, elem)
    if kind == "basic_tp":
        return gen_basic_tp(_model_from(spec), n_gpus, elem)
    if kind == "pure":
        phase = _expect(spec, "phase", str, "workload", default="reduction")
        return pure_phase_workload(
            phase, n_gpus,
            tiles_per_gpu=_expect(spec, "tiles_per_gpu", int, "workload", default=2),
            bursts_per_row=_expect(spec, "bursts_per_row", int, "workload", default=1))
    if kind == "two_phase":
        return two_phase_workload(
            n_gpus,
            tiles_per_gpu=_expect(spec, "tiles_per_gpu", int, "workload", default=1))
    if kind == "fuzz":
        return fuzz_workload(_expect(spec, "seed", int, "workload", default=0), n_gpus)
    if kind == "random_dag":
        return random_dag_workload(_expect(spec, "seed", int, "workload", default=0),
                                   n_gpus)
    raise ConfigError("workload.kind", f"unknown workload kind '{kind}'")


def parse_config(doc: dict) -> tuple[ExperimentConfig, dict]:
    """Validate a JSON document into (ExperimentConfig, workload spec)."""
    if not isinstance(doc, dict):
        raise ConfigError("", "config root must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "")

    fabric = _expect(doc, "fabric", dict, "", default={})
    _reject_unknown(fabric, _FABRIC_KEYS, "fabric")
    merge = _expect(doc, "merge", dict, "", default={})
    _reject_unknown(merge, _MERGE_KEYS, "merge")
    coord = _expect(doc, "coordination", dict, "", default={})
    _reject_unknown(coord, _COORD_KEYS, "coordination")
    values = _expect(doc, "values", dict, "", default={})
    _reject_unknown(values, _VALUE_KEYS, "values")
    compute_doc = _expect(doc, "compute", dict, "", default={})
    _reject_unknown(compute_doc, _COMPUTE_KEYS, "compute")

    mode_str = _expect(doc, "mode", str, "", default="full")
    try:
        mode = ExecMode(mode_str)
    except ValueError:
        raise ConfigError("mode", f"unknown mode '{mode_str}' "
                          f"(one of {[m.value for m in ExecMode]})") from None

    try:
        compute = ComputeConfig(**compute_doc)
    except TypeError as e:
        raise ConfigError("compute", str(e)) from None

    trace = _expect(doc, "trace_link_ids", list, "", default=[])
    if not all(isinstance(x, int) for x in trace):
        raise ConfigError("trace_link_ids", "must be a list of integers")

    cfg = ExperimentConfig(
        name=_expect(doc, "name", str, "", default="run"),
        n_gpus=_expect(doc, "n_gpus", int, "", default=8),
        n_switches=_expect(doc, "n_switches", int, "", default=4),
        mode=mode,
        link_bandwidth_bytes_per_us=_expect(
            fabric, "link_bandwidth_bytes_per_us", int, "fabric", default=0),
        link_latency_ns=_expect(fabric, "link_latency_ns", int, "fabric", default=250),
        interleave_bytes=_expect(fabric, "interleave_bytes", int, "fabric", default=256),
        merge_enabled=_expect(merge, "enabled", bool, "merge", default=True),
        entries_per_port=_expect(merge, "entries_per_port", int, "merge", default=320),
        merge_timeout_ns=_expect(merge, "timeout_ns", int, "merge", default=10_000),
        lead_threshold=_expect(coord, "lead_threshold", int, "coordination", default=8),
        compute=compute,
        track_values=_expect(values, "track", bool, "values", default=False),
        value_dtype=_expect(values, "dtype", str, "values", default="int64"),
        value_width=_expect(values, "width", int, "values", default=4),
        seed=_expect(doc, "seed", int, "", default=0),
        hash_events=_expect(doc, "hash_events", bool, "", default=False),
        trace_link_ids=tuple(trace),
        max_events=_expect(doc, "max_events", int, "", default=500_000_000),
        sim_time_limit_ns=_expect(doc, "sim_time_limit_ns", int, "", default=0),
    )
    cfg.validate()
    wl_spec = doc.get("workload", {"kind": "sublayer"})
    # Build once to validate; the caller re-builds per run as needed.
    build_workload(wl_spec, cfg.n_gpus)
    return cfg, wl_spec


def load_config(path: str) -> tuple[ExperimentConfig, dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON at {path}: {e}") from None
    return parse_config(doc)


def example_config() -> dict:
    return {
        "name": "sublayer-demo",
        "workload": {"kind": "sublayer", "model": "mega-gpt-4b", "layer": "L1",
                     "batch": 1},
        "n_gpus": 8,
        "n_switches": 4,
        "mode": "full",
        "merge": {"enabled": True, "entries_per_port": 320, "timeout_ns": 10000},
        "seed": 0,
    }
