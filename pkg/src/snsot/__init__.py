"""Sinkhorn-Newton-Sparse solvers for entropic optimal transport."""

from .core import (
    DualPotentials,
    LogPlan,
    Problem,
    SolverConfig,
    Trace,
    TraceRecord,
    ValidationError,
    entropy,
    l1_marginal_error,
    marginal_kl,
    transport_cost,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "DualPotentials",
    "LogPlan",
    "Problem",
    "SolverConfig",
    "Trace",
    "TraceRecord",
    "ValidationError",
    "entropy",
    "l1_marginal_error",
    "marginal_kl",
    "transport_cost",
    "validate",
]
