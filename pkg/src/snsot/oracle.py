"""Brute-force ground truth for small uniform-marginal assignment instances.

With ``r = c = 1/n`` the vertices of the transport polytope are the
scaled permutation matrices, so ``n!`` enumeration gives the exact LP
optimum, the set of optimal vertices and the vertex optimality gap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import LogPlan

MAX_BRUTE_FORCE_N = 10
# vertex costs closer than this are treated as ties
TIE_TOL = 1e-12


@dataclass(frozen=True)
class AssignmentOracleResult:
    optimal_cost: float
    optimal_permutations: tuple
    vertex_gap: Optional[float]
    n: int

    def vertex(self, perm) -> np.ndarray:
        """The plan ``(1/n) * permutation_matrix(perm)``."""
        V = np.zeros((self.n, self.n))
        V[np.arange(self.n), list(perm)] = 1.0 / self.n
        return V

    @property
    def unique(self) -> bool:
        return len(self.optimal_permutations) == 1


def brute_force_assignment(cost) -> AssignmentOracleResult:
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError(f"cost must be square, got {cost.shape}")
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"n={n} too large for n! enumeration (max {MAX_BRUTE_FORCE_N})")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    totals = cost[np.arange(n), perms].sum(axis=1) / n
    best = float(totals.min())
    tied = totals <= best + TIE_TOL
    optimal = tuple(tuple(int(j) for j in p) for p in perms[tied])
    rest = totals[~tied]
    gap = float(rest.min() - best) if rest.size else None
    return AssignmentOracleResult(best, optimal, gap, n)


def dist_to_optimal_vertices(plan: LogPlan, result: AssignmentOracleResult) -> float:
    """``min_V ||P - V||_1`` over optimal vertices; an upper bound on the
    distance to the optimal face, exact when the optimum is unique."""
    P = plan.plan()
    return min(float(np.abs(P - result.vertex(p)).sum()) for p in result.optimal_permutations)


def sparsity_profile(plan: LogPlan, target_sparsity: float) -> tuple:
    """Keep the ``ceil(lambda n^2)`` largest entries; return ``(tau, eps)``.

    ``tau`` is the kept fraction and ``eps`` the L1 mass of everything
    dropped, so the plan is certified ``(tau, eps)``-sparse.
    """
    P = plan.plan()
    n = P.shape[0]
    if target_sparsity * n * n < 1:
        raise ValueError("target_sparsity keeps no entry")
    k = max(1, min(math.ceil(target_sparsity * n * n - 1e-9), n * n))
    flat = np.abs(P).ravel()
    dropped = np.partition(flat, n * n - k)[: n * n - k]
    return k / (n * n), float(dropped.sum())


def entropic_2x2_reference(eta: float) -> np.ndarray:
    """Closed-form entropic plan for ``C = [[0, 1], [1, 0]]``, ``r = c = (1/2, 1/2)``.

    Feasible plans are ``[[p, 1/2 - p], [1/2 - p, p]]``; setting the
    derivative of ``(1 - 2p) + (2/eta)(p log p + (1/2 - p) log(1/2 - p))``
    to zero gives ``p / (1/2 - p) = e^eta``.
    """
    p = 0.5 / (1.0 + math.exp(-eta))
    q = 0.5 / (1.0 + math.exp(eta))
    return np.array([[p, q], [q, p]])
