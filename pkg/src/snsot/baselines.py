"""Reference solvers for ablations: dense Sinkhorn-Newton and L-BFGS."""

from __future__ import annotations

import logging
import warnings
from collections import deque
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .core import DualPotentials, NullTrace, Problem, SolverConfig, Trace
from .lyapunov import PotentialState, negated_hessian
from .sparse_newton import ascend, converged, fallback, line_search, project_balanced
from . import sparse_newton

log = logging.getLogger(__name__)


def dense_direction(state: PotentialState, config: SolverConfig):
    """Exact augmented Newton direction by Cholesky on the ``2n x 2n`` system.

    At large ``eta`` tiny plan entries make the matrix numerically
    semidefinite and Cholesky can break down; the symmetric indefinite
    solver (Bunch-Kaufman) takes over then.
    """
    op = negated_hessian(state.problem, state.duals, augmented=True, state=state)
    H = op.dense()
    b = state.augmented_gradient
    try:
        factor = scipy.linalg.cho_factor(H, lower=True, check_finite=True)
    except np.linalg.LinAlgError:
        log.info("Cholesky failed; falling back to a symmetric indefinite solve")
        with warnings.catch_warnings():
            # ill-conditioning is expected here; the line search guards the step
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            return scipy.linalg.solve(H, b, assume_a="sym"), None
    return scipy.linalg.cho_solve(factor, b), None


def run_dense_newton(problem: Problem, duals: DualPotentials, config: SolverConfig,
                     trace: Optional[Trace] = None) -> DualPotentials:
    """Same loop as the sparse Newton stage, but with an ``O(n^3)`` direct solve.

    Always works on the augmented potential, whose negated Hessian is
    positive definite.
    """
    if not config.augmented:
        config = SolverConfig(**{**config.as_dict(), "augmented": True})
    return sparse_newton.run(problem, duals, config, trace, stage="dense_newton",
                             direction=dense_direction)


def two_loop(grad: np.ndarray, pairs) -> np.ndarray:
    """L-BFGS two-loop recursion: ``H_k grad`` for the inverse-Hessian model.

    ``pairs`` holds ``(s, y, 1/<y, s>)`` oldest first; the seed matrix is
    ``gamma I`` with ``gamma = <s, y>/<y, y>`` of the newest pair.
    """
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return q


def lbfgs_maximize(value: Callable, grad: Callable, z0: np.ndarray, memory: int = 10,
                   max_iters: int = 100, gtol: float = 0.0, c1: float = 1e-4,
                   shrink: float = 0.5, max_backtracks: int = 40):
    """Plain L-BFGS ascent on a smooth concave function.

    Returns ``(z, iterations)``. Stops when ``||grad|| <= gtol`` or the line
    search fails.
    """
    if memory < 1:
        raise ValueError("memory must be >= 1")
    z = np.asarray(z0, dtype=np.float64).copy()
    pairs = deque(maxlen=memory)
    # minimize -f: gradient g = -grad f
    g = -grad(z)
    it = 0
    for it in range(1, max_iters + 1):
        if np.linalg.norm(g) <= gtol:
            it -= 1
            break
        d = -two_loop(g, list(pairs))
        alpha = line_search(value, z, d, -g, c1=c1, shrink=shrink, max_backtracks=max_backtracks)
        if alpha == 0.0:
            break
        z_new = z + alpha * d
        g_new = -grad(z_new)
        _remember(pairs, z_new - z, g_new - g)
        z, g = z_new, g_new
    return z, it


def _remember(pairs, s: np.ndarray, y: np.ndarray) -> None:
    sy = float(s @ y)
    if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
        return
    pairs.append((s, y, 1.0 / sy))


def run_lbfgs(problem: Problem, duals: DualPotentials, memory: int, config: SolverConfig,
              trace: Optional[Trace] = None) -> DualPotentials:
    """Maximize the augmented potential with L-BFGS from a warm start.

    Uses the same Armijo search, stopping rule and Sinkhorn fallback as the
    Newton solvers. Curvature pairs with ``<s, y> <= 1e-12 ||s|| ||y||`` are
    skipped; the memory is cleared after a fallback.
    """
    if memory < 1:
        raise ValueError("memory must be >= 1")
    if trace is None:
        trace = NullTrace()
    pairs = deque(maxlen=memory)
    z = project_balanced(duals)
    state = PotentialState.at(problem, z)
    for it in range(1, config.n2 + 1):
        done, _, _ = converged(state, config)
        if done:
            break
        g = -state.augmented_gradient
        d = -two_loop(g, list(pairs))
        alpha = ascend(state, d, config)
        if alpha > 0.0:
            z = DualPotentials.from_vector(z.as_vector() + alpha * d)
            new_state = PotentialState.at(problem, z)
            _remember(pairs, alpha * d, -new_state.augmented_gradient - g)
        else:
            log.info("line search failed at lbfgs iteration %d; Sinkhorn fallback", it)
            z = fallback(problem, z)
            pairs.clear()
            new_state = PotentialState.at(problem, z)
        state = new_state
        trace.add("lbfgs", it, problem, z, step_size=alpha)
    return z
