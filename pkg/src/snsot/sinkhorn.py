"""Log-domain Sinkhorn matrix scaling.

Each half-step is an exact coordinate maximization of the Lyapunov
potential: the x-step rescales rows so that ``P1 = r``, the y-step rescales
columns so that ``P^T 1 = c``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import (
    DualPotentials,
    LogPlan,
    NullTrace,
    Problem,
    Trace,
    l1_marginal_error,
    log_plan_entries,
    logsumexp_rows,
    marginal_kl,
)


def x_step(problem: Problem, duals: DualPotentials) -> DualPotentials:
    le = log_plan_entries(problem, duals.x, duals.y)
    x = duals.x + (np.log(problem.r) - logsumexp_rows(le)) / problem.eta
    return DualPotentials(x, duals.y)


def y_step(problem: Problem, duals: DualPotentials) -> DualPotentials:
    le = log_plan_entries(problem, duals.x, duals.y)
    y = duals.y + (np.log(problem.c) - logsumexp_rows(le.T)) / problem.eta
    return DualPotentials(duals.x, y)


def sweep(problem: Problem, duals: DualPotentials) -> DualPotentials:
    """One full iteration: x-step followed by y-step."""
    return y_step(problem, x_step(problem, duals))


def run(problem: Problem, duals: DualPotentials, steps: int,
        trace: Optional[Trace] = None, stop_kl: Optional[float] = None,
        stop_l1: Optional[float] = None) -> DualPotentials:
    """Apply ``steps`` Sinkhorn iterations, recording one trace row each.

    With ``stop_kl`` (or ``stop_l1``) the loop also ends as soon as the
    marginal divergence of the current plan drops to that level.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if trace is None:
        trace = NullTrace()
    want_stop = stop_kl is not None or stop_l1 is not None
    for it in range(1, steps + 1):
        duals = sweep(problem, duals)
        if want_stop or not isinstance(trace, NullTrace):
            plan = LogPlan.from_duals(problem, duals)
            rec = trace.add("sinkhorn", it, problem, duals, plan=plan)
            if want_stop:
                if rec is None:
                    kl, l1 = marginal_kl(plan, problem), l1_marginal_error(plan, problem)
                else:
                    kl, l1 = rec.marginal_kl, rec.l1_marginal_error
                if (stop_kl is not None and kl <= stop_kl) or (stop_l1 is not None and l1 <= stop_l1):
                    break
    return duals
