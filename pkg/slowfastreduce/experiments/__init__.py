"""Experiment kinds runnable from a configuration file."""

from .base import EXIT_ERROR, EXIT_OK, EXIT_VALIDATION_FAILED, Experiment
from .manifold_gap import ManifoldGapExperiment
from .martingale_check import MartingaleCheckExperiment
from .sigma_table import SigmaTableExperiment
from .simulate import SimulateExperiment
from .sweeps import AverageSweepExperiment, IntermediateSweepExperiment
from .validate_toy import ValidateToyExperiment

# Dictionary of available experiment kinds
EXPERIMENT_TYPES = {
    "simulate": SimulateExperiment,
    "manifold_gap": ManifoldGapExperiment,
    "average_sweep": AverageSweepExperiment,
    "intermediate_sweep": IntermediateSweepExperiment,
    "sigma_table": SigmaTableExperiment,
    "validate_toy": ValidateToyExperiment,
    "martingale_check": MartingaleCheckExperiment,
}

__all__ = [
    "Experiment",
    "SimulateExperiment",
    "ManifoldGapExperiment",
    "AverageSweepExperiment",
    "IntermediateSweepExperiment",
    "SigmaTableExperiment",
    "ValidateToyExperiment",
    "MartingaleCheckExperiment",
    "EXPERIMENT_TYPES",
    "EXIT_OK",
    "EXIT_ERROR",
    "EXIT_VALIDATION_FAILED",
]
