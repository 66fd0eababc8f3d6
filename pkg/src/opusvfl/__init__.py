"""Deterministic simulator for incentive-aware, differentially private
vertical federated learning."""

from .config import ExperimentConfig, parse_config, serialize
from .orchestrator import Experiment, run_experiment
from .runlog import RunSummary

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "Experiment",
    "RunSummary",
    "parse_config",
    "run_experiment",
    "serialize",
    "__version__",
]
