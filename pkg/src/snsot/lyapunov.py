"""Lyapunov (dual) potential of entropic OT, its gradient and curvature.

For duals ``z = (x, y)`` the potential is

    f(x, y) = -(1/eta) sum_ij exp(eta(-c_ij + x_i + y_j) - 1) + r.x + c.y

which is concave and invariant under ``(x + g1, y - g1)``.  The curvature
operator exposed here is the *negated* Hessian

    H = eta [[diag(P1), P], [P^T, diag(P^T 1)]]

so it is positive semidefinite and can be handed to conjugate gradient.
The ascent Newton direction solves ``H dz = grad f``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .core import (
    DualPotentials,
    LogPlan,
    Problem,
    log_plan_entries,
    logsumexp_rows,
    potential_from_plan,
)

PlanBlock = Union[np.ndarray, sp.csr_matrix]


def _check_duals(duals: DualPotentials) -> None:
    if not (np.all(np.isfinite(duals.x)) and np.all(np.isfinite(duals.y))):
        raise FloatingPointError("dual potentials contain non-finite entries")


def degenerate_direction(n: int) -> np.ndarray:
    return np.concatenate([np.ones(n), -np.ones(n)])


@dataclass(frozen=True, eq=False)
class PotentialState:
    """Plan, marginals and gradient evaluated once at a dual point."""

    problem: Problem
    duals: DualPotentials
    log_plan: LogPlan
    plan: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray

    @classmethod
    def at(cls, problem: Problem, duals: DualPotentials) -> "PotentialState":
        _check_duals(duals)
        lp = LogPlan.from_duals(problem, duals)
        with np.errstate(over="ignore"):
            P = np.exp(lp.log_entries)
        if np.all(np.isfinite(P)):
            rows, cols = P.sum(axis=1), P.sum(axis=0)
        else:
            with np.errstate(over="ignore"):
                rows = np.exp(lp.log_row_sums())
                cols = np.exp(lp.log_col_sums())
        return cls(problem, duals, lp, P, rows, cols)

    @property
    def gradient(self) -> np.ndarray:
        return np.concatenate([self.problem.r - self.row_sums, self.problem.c - self.col_sums])

    @property
    def augmented_gradient(self) -> np.ndarray:
        n = self.problem.n
        return self.gradient - self.duals.imbalance() * degenerate_direction(n)

    @property
    def value(self) -> float:
        p = self.problem
        return float(-np.sum(self.row_sums) / p.eta + p.r @ self.duals.x + p.c @ self.duals.y)

    @property
    def augmented_value(self) -> float:
        return self.value - 0.5 * self.duals.imbalance() ** 2

    def increment(self, direction: np.ndarray, alpha: float, augmented: bool = True) -> float:
        """``f(z + alpha*dz) - f(z)`` (or of ``f_aug``) without cancellation.

        Expanding the exponential around ``z`` splits the change into the
        exact linear term ``alpha <grad, dz>`` and a non-negative curvature
        remainder ``(1/eta) sum P_ij (e^u - 1 - u)``. Differencing two
        evaluations of ``f`` instead loses every digit once the step is
        below ``sqrt(eps) |f|``.
        """
        n = self.problem.n
        eta = self.problem.eta
        dx, dy = direction[:n], direction[n:]
        if eta * alpha * (np.max(dx) + np.max(dy)) + np.max(self.log_plan.log_entries) > 700.0:
            # the trial plan overflows: f(z + alpha dz) = -inf
            return -np.inf
        remainder = _kernels.curvature_remainder(self.plan, dx, dy, eta * alpha) / eta
        g = self.gradient
        change = alpha * float(g @ direction) - float(remainder)
        if augmented:
            s = self.duals.imbalance()
            t = float(np.sum(dx) - np.sum(dy))
            change -= alpha * s * t + 0.5 * alpha * alpha * t * t
        if np.isnan(change):
            return -np.inf
        return change


def potential(problem: Problem, duals: DualPotentials) -> float:
    _check_duals(duals)
    lp = LogPlan.from_duals(problem, duals)
    return potential_from_plan(problem, duals, lp)


def gradient(problem: Problem, duals: DualPotentials) -> np.ndarray:
    """``[r - P1; c - P^T 1]`` with marginals taken through log-sum-exp."""
    _check_duals(duals)
    le = log_plan_entries(problem, duals.x, duals.y)
    with np.errstate(over="ignore"):
        rows = np.exp(logsumexp_rows(le))
        cols = np.exp(logsumexp_rows(le.T))
    return np.concatenate([problem.r - rows, problem.c - cols])


def augmented_potential(problem: Problem, duals: DualPotentials) -> float:
    return potential(problem, duals) - 0.5 * duals.imbalance() ** 2


def augmented_gradient(problem: Problem, duals: DualPotentials) -> np.ndarray:
    return gradient(problem, duals) - duals.imbalance() * degenerate_direction(problem.n)


@dataclass(frozen=True, eq=False)
class HessianOperator:
    """Matrix-free ``eta [[diag(rows), B], [B^T, diag(cols)]] (+ v v^T) + shift I``.

    ``plan_block`` is ``P`` itself (dense ndarray) or a thresholded sparse
    copy of it; the diagonal always uses the full marginals.
    """

    row_sums: np.ndarray
    col_sums: np.ndarray
    plan_block: PlanBlock
    eta: float
    rank1_correction: bool = False
    shift: float = 0.0

    @property
    def n(self) -> int:
        return self.row_sums.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        d = self.eta * np.concatenate([self.row_sums, self.col_sums]) + self.shift
        if self.rank1_correction:
            d = d + 1.0
        return d

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return hessian_matvec(self, u)

    def dense(self) -> np.ndarray:
        """Assemble the full ``2n x 2n`` matrix (tests and the dense baseline)."""
        n = self.n
        B = self.plan_block.toarray() if sp.issparse(self.plan_block) else self.plan_block
        H = np.empty((2 * n, 2 * n))
        H[:n, :n] = np.diag(self.eta * self.row_sums)
        H[:n, n:] = self.eta * B
        H[n:, :n] = self.eta * B.T
        H[n:, n:] = np.diag(self.eta * self.col_sums)
        if self.shift:
            H[np.diag_indices(2 * n)] += self.shift
        if self.rank1_correction:
            v = degenerate_direction(n)
            H += np.outer(v, v)
        return H


def negated_hessian(problem: Problem, duals: DualPotentials, augmented: bool = False,
                    state: PotentialState | None = None) -> HessianOperator:
    if state is None:
        state = PotentialState.at(problem, duals)
    return HessianOperator(
        row_sums=state.row_sums,
        col_sums=state.col_sums,
        plan_block=state.plan,
        eta=problem.eta,
        rank1_correction=augmented,
    )


def hessian_matvec(op: HessianOperator, u: np.ndarray) -> np.ndarray:
    n = op.n
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (2 * n,):
        raise ValueError(f"vector of shape {u.shape} does not match operator of size {2 * n}")
    ux, uy = u[:n], u[n:]
    B = op.plan_block
    top = op.row_sums * ux + B @ uy
    if sp.issparse(B):
        bottom = op.col_sums * uy + B.T @ ux
    else:
        bottom = op.col_sums * uy + ux @ B
    out = op.eta * np.concatenate([top, bottom])
    if op.shift:
        out += op.shift * u
    if op.rank1_correction:
        out += (np.sum(ux) - np.sum(uy)) * degenerate_direction(n)
    return out
