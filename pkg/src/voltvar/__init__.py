"""Model-free Volt/VAr control: plant simulator, recursive response
regression, projected-gradient dispatch, baselines, and scenario tooling."""

from .controller import ControllerConfig, run_algorithm1
from .netmodel import NetworkCase, NodePhase, load_case, validate_case
from .powerflow import build_admittance, solve
from .regression import ResponseModel, Sample
from .scenario import Profile, ScenarioConfig, compute_mae, compute_metrics, load_profile, run

__version__ = "0.1.0"

__all__ = [
    "ControllerConfig",
    "NetworkCase",
    "NodePhase",
    "Profile",
    "ResponseModel",
    "Sample",
    "ScenarioConfig",
    "build_admittance",
    "compute_mae",
    "compute_metrics",
    "load_case",
    "load_profile",
    "run",
    "run_algorithm1",
    "solve",
    "validate_case",
    "__version__",
]
