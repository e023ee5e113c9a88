"""Domain types and scalar metrics for entropic optimal transport.

The transport plan is never stored as raw probabilities. ``LogPlan`` keeps
``eta * (-C + x 1^T + 1 y^T) - 1`` so that large regularization strengths
do not overflow ``exp``; every sum over the plan goes through a
max-subtracted log-sum-exp.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Iterator, Optional

import numpy as np

MARGINAL_SUM_TOL = 1e-12
# log-entries below this underflow to 0.0 in double precision (0 log 0 = 0)
LOG_FLOOR = -745.0

STAGES = ("sinkhorn", "newton", "dense_newton", "lbfgs")


class ValidationError(ValueError):
    """Raised when a problem instance violates its invariants."""


@dataclass(frozen=True, eq=False)
class Problem:
    """An entropic OT instance: cost matrix, two marginals and ``eta``."""

    cost: np.ndarray
    r: np.ndarray
    c: np.ndarray
    eta: float

    def __post_init__(self):
        object.__setattr__(self, "cost", np.asarray(self.cost, dtype=np.float64))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64))
        object.__setattr__(self, "eta", float(self.eta))

    @property
    def n(self) -> int:
        return self.r.shape[0]

    def with_eta(self, eta: float) -> "Problem":
        return Problem(self.cost, self.r, self.c, eta)


@dataclass(frozen=True, eq=False)
class DualPotentials:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))

    @classmethod
    def zeros(cls, n: int) -> "DualPotentials":
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_vector(cls, z: np.ndarray) -> "DualPotentials":
        z = np.asarray(z, dtype=np.float64)
        n = z.shape[0] // 2
        return cls(z[:n].copy(), z[n:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])

    def imbalance(self) -> float:
        """``sum(x) - sum(y)``, the coordinate along the degenerate direction."""
        return float(np.sum(self.x) - np.sum(self.y))


@dataclass(frozen=True, eq=False)
class LogPlan:
    """Transport plan held as elementwise logarithms."""

    log_entries: np.ndarray

    @classmethod
    def from_duals(cls, problem: Problem, duals: DualPotentials) -> "LogPlan":
        return cls(log_plan_entries(problem, duals.x, duals.y))

    @classmethod
    def from_plan(cls, plan: np.ndarray) -> "LogPlan":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(plan, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.log_entries.shape[0]

    def plan(self) -> np.ndarray:
        return np.exp(self.log_entries)

    def log_row_sums(self) -> np.ndarray:
        return logsumexp_rows(self.log_entries)

    def log_col_sums(self) -> np.ndarray:
        return logsumexp_rows(self.log_entries.T)


@dataclass
class SolverConfig:
    """Knobs shared by the Newton-type solvers.

    ``target_sparsity`` is the fraction of plan entries kept when the
    Hessian is thresholded. ``cg_max_iters=None`` resolves to
    ``min(10 n, 5000)`` at solve time.
    """

    n1: int = 20
    n2: int = 100
    target_sparsity: float = 1.0
    cg_rel_tol: float = 1e-10
    cg_max_iters: Optional[int] = None
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max_backtracks: int = 40
    stop_marginal_kl: float = 1e-25
    stop_l1: float = 1e-12
    augmented: bool = True
    jacobi: bool = False

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 0:
            raise ValueError("n1 and n2 must be non-negative")
        if not 0.0 < self.target_sparsity <= 1.0:
            raise ValueError("target_sparsity must lie in (0, 1]")
        if self.cg_rel_tol <= 0:
            raise ValueError("cg_rel_tol must be positive")
        if self.cg_max_iters is not None and self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be positive")
        if not 0.0 < self.armijo_c1 < 1.0:
            raise ValueError("armijo_c1 must lie in (0, 1)")
        if not 0.0 < self.armijo_shrink < 1.0:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if self.armijo_max_backtracks < 1:
            raise ValueError("armijo_max_backtracks must be positive")
        if self.stop_marginal_kl < 0 or self.stop_l1 < 0:
            raise ValueError("stopping thresholds must be non-negative")

    def check_for(self, n: int) -> None:
        if self.target_sparsity * n * n < 1:
            raise ValueError(
                f"target_sparsity {self.target_sparsity} keeps no entry of a {n}x{n} plan"
            )

    def cg_iters_for(self, n: int) -> int:
        if self.cg_max_iters is not None:
            return self.cg_max_iters
        # CG on these systems routinely needs a few multiples of n iterations
        return min(10 * n, 5000)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TraceRecord:
    """One convergence-trace row.

    ``step_size`` is diagnostic only and is not part of the CSV schema; a
    Newton-stage row with ``step_size == 0.0`` marks a line-search failure
    that was replaced by a Sinkhorn sweep.
    """

    stage: str
    iteration: int
    elapsed_seconds: float
    potential_value: float
    marginal_kl: float
    l1_marginal_error: float
    hessian_sparsity: Optional[float] = None
    step_size: Optional[float] = None

    CSV_COLUMNS = (
        "stage",
        "iteration",
        "elapsed_seconds",
        "potential_value",
        "marginal_kl",
        "l1_marginal_error",
        "hessian_sparsity",
    )

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.hessian_sparsity is not None and not 0.0 <= self.hessian_sparsity <= 1.0:
            raise ValueError("hessian_sparsity must lie in [0, 1]")

    def csv_row(self) -> list:
        return [
            self.stage,
            self.iteration,
            repr(self.elapsed_seconds),
            repr(self.potential_value),
            repr(self.marginal_kl),
            repr(self.l1_marginal_error),
            "" if self.hessian_sparsity is None else repr(self.hessian_sparsity),
        ]

    def timeless(self) -> tuple:
        """The record without its wall-clock column, for reproducibility checks."""
        return (
            self.stage,
            self.iteration,
            self.potential_value,
            self.marginal_kl,
            self.l1_marginal_error,
            self.hessian_sparsity,
            self.step_size,
        )


@dataclass
class Trace:
    """In-memory trace sink; ``elapsed_seconds`` is measured from creation.

    Subclasses override :meth:`emit` to stream rows elsewhere.
    """

    records: list = field(default_factory=list)
    _origin: float = field(default_factory=time.perf_counter, repr=False)

    def elapsed(self) -> float:
        return time.perf_counter() - self._origin

    def add(self, stage: str, iteration: int, problem: Problem, duals: DualPotentials,
            hessian_sparsity: Optional[float] = None, step_size: Optional[float] = None,
            plan: Optional[LogPlan] = None) -> TraceRecord:
        """Evaluate the plan at ``duals`` and append a row."""
        if plan is None:
            plan = LogPlan.from_duals(problem, duals)
        return self.record(
            stage, iteration,
            potential_from_plan(problem, duals, plan),
            marginal_kl(plan, problem),
            l1_marginal_error(plan, problem),
            hessian_sparsity=hessian_sparsity,
            step_size=step_size,
        )

    def record(self, stage: str, iteration: int, potential_value: float, kl: float,
               l1: float, hessian_sparsity: Optional[float] = None,
               step_size: Optional[float] = None) -> TraceRecord:
        rec = TraceRecord(
            stage=stage,
            iteration=iteration,
            elapsed_seconds=self.elapsed(),
            potential_value=float(potential_value),
            marginal_kl=float(kl),
            l1_marginal_error=float(l1),
            hessian_sparsity=hessian_sparsity,
            step_size=step_size,
        )
        self.emit(rec)
        return rec

    def emit(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def stage(self, name: str) -> list:
        return [r for r in self.records if r.stage == name]


class NullTrace(Trace):
    """Discards everything; used when a caller does not want a trace."""

    def add(self, *args, **kwargs):
        return None

    def record(self, *args, **kwargs):
        return None


# ---------------------------------------------------------------------------
# log-domain helpers


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp with per-row max subtraction."""
    m = np.max(a, axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(a - safe[:, None]), axis=1)
    with np.errstate(divide="ignore"):
        return np.log(s) + safe


def log_plan_entries(problem: Problem, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    eta = problem.eta
    return eta * (x[:, None] + y[None, :] - problem.cost) - 1.0


def divergence_terms(p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """``p log(p/q) - p + q`` per entry, accurate when ``q`` is close to ``p``."""
    d = log_q - np.log(p)
    small = np.abs(d) < 1e-3
    ds = np.where(small, d, 0.0)
    series = ds * ds * (0.5 + ds * (1.0 / 6.0 + ds * (1.0 / 24.0 + ds / 120.0)))
    with np.errstate(over="ignore"):
        direct = np.expm1(np.where(small, 0.0, d)) - np.where(small, 0.0, d)
    return p * np.where(small, series, direct)


def marginal_kl(plan: LogPlan, problem: Problem) -> float:
    """Marginal divergence ``KL(r || P1) + KL(c || P^T 1)``.

    Each KL is evaluated in its generalized form ``sum p log(p/q) - p + q``,
    which coincides with the ordinary KL whenever ``P`` carries unit mass
    and stays non-negative when it does not. Terms are computed from the
    log-marginals so the value keeps full relative accuracy down to ~1e-30.
    """
    row = divergence_terms(problem.r, plan.log_row_sums())
    col = divergence_terms(problem.c, plan.log_col_sums())
    return float(np.sum(row) + np.sum(col))


def l1_marginal_error(plan: LogPlan, problem: Problem) -> float:
    rows = np.exp(plan.log_row_sums())
    cols = np.exp(plan.log_col_sums())
    return float(np.sum(np.abs(rows - problem.r)) + np.sum(np.abs(cols - problem.c)))


def transport_cost(plan: LogPlan, problem: Problem) -> float:
    """``C . P``; entries below the underflow floor contribute nothing."""
    le = plan.log_entries
    p = np.where(le < LOG_FLOOR, 0.0, np.exp(le))
    return float(np.sum(problem.cost * p))


def entropy(plan: LogPlan) -> float:
    """``sum p log p`` with the ``0 log 0 = 0`` convention."""
    le = plan.log_entries
    live = le >= LOG_FLOOR
    safe = np.where(live, le, 0.0)
    return float(np.sum(np.where(live, np.exp(safe) * safe, 0.0)))


def potential_from_plan(problem: Problem, duals: DualPotentials, plan: LogPlan) -> float:
    log_mass = plan.log_row_sums()
    m = np.max(log_mass)
    with np.errstate(over="ignore"):
        mass = math.exp(m) * float(np.sum(np.exp(log_mass - m))) if np.isfinite(m) else 0.0
    return float(-mass / problem.eta + problem.r @ duals.x + problem.c @ duals.y)


def validate(problem: Problem) -> None:
    """Raise :class:`ValidationError` unless ``problem`` is a well-formed instance."""
    C, r, c = problem.cost, problem.r, problem.c
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValidationError(f"cost must be square, got shape {C.shape}")
    n = C.shape[0]
    if r.shape != (n,) or c.shape != (n,):
        raise ValidationError(
            f"marginal shapes {r.shape} and {c.shape} do not match cost of size {n}"
        )
    if not np.all(np.isfinite(C)):
        raise ValidationError("cost matrix has non-finite entries")
    if not (np.isfinite(problem.eta) and problem.eta > 0):
        raise ValidationError(f"eta must be positive and finite, got {problem.eta}")
    for name, m in (("row", r), ("column", c)):
        if not np.all(np.isfinite(m)):
            raise ValidationError(f"{name} marginal has non-finite entries")
        if np.any(m <= 0):
            i = int(np.argmax(m <= 0))
            raise ValidationError(f"{name} marginal entry {i} is {m[i]!r}; must be > 0")
        total = float(np.sum(m))
        if abs(total - 1.0) > MARGINAL_SUM_TOL:
            raise ValidationError(f"{name} marginal sums to {total!r}, not 1")
