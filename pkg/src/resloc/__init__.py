"""Resilient multi-hypothesis collaborative localization under RF spoofing."""
from .kernels import BACKEND as kernel_backend
from .models import AgentState, ImuInput, NoiseConfig, Pose, RfMeasurement
from .scenario import ConfigError, ScenarioConfig, default_scenario, load_scenario
from .sim import MonteCarloResult, RunResult, run_monte_carlo, run_realization

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "ConfigError",
    "ImuInput",
    "MonteCarloResult",
    "NoiseConfig",
    "Pose",
    "RfMeasurement",
    "RunResult",
    "ScenarioConfig",
    "default_scenario",
    "kernel_backend",
    "load_scenario",
    "run_monte_carlo",
    "run_realization",
]
