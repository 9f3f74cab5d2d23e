"""Non-Markovian qubit dynamics from an exact hierarchy master equation and QSD trajectories."""

import json as _json

from ._core import (
    ConfigError,
    NumericalError,
    concurrence,
    lindblad_propagate,
    named_state,
    novikov_ratio,
    partial_trace,
    preset_names,
    propagate_master,
    pseudomode_evolve,
    qsd_ensemble,
    single_qubit_benchmark,
    trace_distance,
)
from ._core import run_config as _run_config
from ._core import validate_config as _validate_config


def run(config, out_dir=""):
    """Run a config (dict or JSON text). Returns (config_hash, {"engine@gamma": (t, rho)})."""
    text = config if isinstance(config, str) else _json.dumps(config)
    return _run_config(text, out_dir)


def validate(config):
    """Invariant report for a config. Returns (passed, text)."""
    text = config if isinstance(config, str) else _json.dumps(config)
    return _validate_config(text)


__all__ = [
    "ConfigError",
    "NumericalError",
    "concurrence",
    "lindblad_propagate",
    "named_state",
    "novikov_ratio",
    "partial_trace",
    "preset_names",
    "propagate_master",
    "pseudomode_evolve",
    "qsd_ensemble",
    "run",
    "single_qubit_benchmark",
    "trace_distance",
    "validate",
]
