"""Simulation harness: data-generating processes, truths, and experiments."""

from .dgp import DgpSpec, Scenario, TrueEstimands, generate_trial, true_estimands
from .experiment import (ExperimentResult, IcsPowerRow, MetricsRow,
                         SimulationAbort, run_experiment, run_ics_power,
                         standard_model_grid)

__all__ = [
    "DgpSpec", "Scenario", "TrueEstimands", "generate_trial", "true_estimands",
    "ExperimentResult", "IcsPowerRow", "MetricsRow", "SimulationAbort",
    "run_experiment", "run_ics_power", "standard_model_grid",
]
