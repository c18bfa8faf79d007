"""Approximation of backward SDE solutions when the forward equation is
hidden behind small-noise observations and its volatility parameter is
unknown.

Pipeline: preliminary estimation on a learning interval, one-step
improvement to an estimator process, filtering with plug-in
coefficients, and evaluation of a semilinear parabolic PDE solution
along the filtered state.
"""

from .model import (
    ConfigError,
    ExperimentConfig,
    ModelSpec,
    ProblemFunctions,
    canonical_model,
    load_config,
    load_config_file,
    serialize_config,
    validate_conditions,
)
from .simulate import NoiseBundle, SamplePath, simulate_forward, simulate_observation

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ModelSpec",
    "NoiseBundle",
    "ProblemFunctions",
    "SamplePath",
    "canonical_model",
    "load_config",
    "load_config_file",
    "serialize_config",
    "simulate_forward",
    "simulate_observation",
    "validate_conditions",
]

__version__ = "0.1.0"
