"""Event-driven simulator for compute-aware request merging in multi-GPU
switch fabrics: in-switch load/reduction merge tables, cross-GPU thread-block
coordination, and graph-level dataflow scheduling."""

from .errors import ConfigError, InternalFault, ProtocolFault
from .gpu_model import ComputeConfig
from .merge_unit import MergeTable, MergeTableConfig
from .runner import ExperimentConfig, RunResult, Simulation, run_experiment
from .workloads import (MODEL_PRESETS, SUBLAYERS, ExecMode, ModelConfig,
                        Workload, gen_basic_tp, gen_sublayer,
                        pure_phase_workload, two_phase_workload)

__version__ = "0.1.0"

__all__ = [
    "ComputeConfig", "ConfigError", "ExecMode", "ExperimentConfig",
    "InternalFault", "MODEL_PRESETS", "MergeTable", "MergeTableConfig",
    "ModelConfig", "ProtocolFault", "RunResult", "SUBLAYERS", "Simulation",
    "Workload", "gen_basic_tp", "gen_sublayer", "pure_phase_workload",
    "run_experiment", "two_phase_workload",
]
