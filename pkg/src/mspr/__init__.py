"""Multivariate Skellam process with resetting: simulation, fitting, diagnostics."""

__version__ = "0.1.0"

from .model import MsprParams, marginal_rates, count_covariance, validate, table1_params  # noqa: E402
from .simulator import SpikeDataset, simulate_dataset, simulate_trial  # noqa: E402
from .estimator import FitResult, fit, bootstrap  # noqa: E402
from .diagnostics import DiagnosticsReport, diagnose  # noqa: E402

__all__ = [
    "MsprParams",
    "marginal_rates",
    "count_covariance",
    "validate",
    "table1_params",
    "SpikeDataset",
    "simulate_dataset",
    "simulate_trial",
    "FitResult",
    "fit",
    "bootstrap",
    "DiagnosticsReport",
    "diagnose",
]
