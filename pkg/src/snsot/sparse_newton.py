"""Sinkhorn-Newton-Sparse: the thresholded-Hessian Newton stage.

After the Sinkhorn warm start the plan is close to a sparse matrix, so the
off-diagonal block of the negated Hessian is truncated to its largest
``ceil(lambda n^2)`` entries. The truncated operator (plus ``v v^T`` for the
augmented potential) stays symmetric and diagonally dominant, so conjugate
gradient applies and a Newton step costs ``O(lambda n^3)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import _kernels, sinkhorn
from .core import (
    DualPotentials,
    LogPlan,
    NullTrace,
    Problem,
    SolverConfig,
    Trace,
    divergence_terms,
)
from .lyapunov import (
    HessianOperator,
    PotentialState,
    degenerate_direction,
    negated_hessian,
    potential,
)
from .oracle import sparsity_profile

log = logging.getLogger(__name__)


class ConjugateGradientError(FloatingPointError):
    """CG met a non-finite value or negative curvature."""


@dataclass(frozen=True, eq=False)
class SparseHessian:
    """Thresholded negated Hessian.

    ``off_block`` holds the retained entries of ``eta * P`` in CSR form (row
    sorted); the diagonal keeps the full marginals, which is what preserves
    diagonal dominance after truncation.
    """

    diag: np.ndarray
    off_block: sp.csr_matrix
    off_block_t: sp.csr_matrix
    threshold_rho: float
    achieved_sparsity: float
    rank1: bool = False
    shift: float = 0.0

    @property
    def n(self) -> int:
        return self.off_block.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.off_block.nnz)

    def matvec(self, u: np.ndarray) -> np.ndarray:
        n = self.n
        ux, uy = u[:n], u[n:]
        out = self.diag * u
        out[:n] += self.off_block @ uy
        out[n:] += self.off_block_t @ ux
        if self.shift:
            out += self.shift * u
        if self.rank1:
            s = np.sum(ux) - np.sum(uy)
            out[:n] += s
            out[n:] -= s
        return out

    def full_diagonal(self) -> np.ndarray:
        d = self.diag + self.shift
        return d + 1.0 if self.rank1 else d

    def dense(self) -> np.ndarray:
        n = self.n
        B = self.off_block.toarray()
        H = np.diag(self.diag + self.shift)
        H[:n, n:] += B
        H[n:, :n] += B.T
        if self.rank1:
            v = degenerate_direction(n)
            H += np.outer(v, v)
        return H


def keep_count(target_sparsity: float, n: int) -> int:
    """``ceil(lambda n^2)``, guarded against ``2/n * n^2 = 200.00000000000003``."""
    k = math.ceil(target_sparsity * n * n - 1e-9)
    return max(1, min(k, n * n))


def sparsify(op: HessianOperator, target_sparsity: float) -> SparseHessian:
    """Keep plan entries at or above the ``ceil(lambda n^2)``-th largest.

    The threshold comes from ``np.partition`` (introselect, linear expected
    time). Every entry tied with the threshold is kept, so the achieved
    sparsity may exceed ``lambda`` by the tie count over ``n^2``.
    """
    n = op.n
    if target_sparsity * n * n < 1:
        raise ValueError("target_sparsity keeps no entry")
    B = op.plan_block.toarray() if sp.issparse(op.plan_block) else op.plan_block
    k = keep_count(target_sparsity, n)
    # eta > 0, so ranking P ranks eta * P
    cutoff = float(np.partition(B.ravel(), n * n - k)[n * n - k])
    rho = op.eta * cutoff
    indptr, indices, data = _kernels.threshold_csr(np.ascontiguousarray(B), cutoff, op.eta)
    off = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    diag = op.eta * np.concatenate([op.row_sums, op.col_sums])
    return SparseHessian(
        diag=diag,
        off_block=off,
        off_block_t=off.T.tocsr(),
        threshold_rho=rho,
        achieved_sparsity=off.nnz / (n * n),
        rank1=op.rank1_correction,
        shift=op.shift,
    )


def conjugate_gradient(op, b: np.ndarray, rel_tol: float = 1e-10, max_iters: int = 1000,
                       jacobi: bool = False):
    """Solve ``op z = b`` for a symmetric PSD ``op``; returns ``(z, iters, residual)``.

    ``residual`` is the true ``||op z - b||_2`` of the returned iterate. If
    the tolerance is not met within ``max_iters`` the iterate with the
    smallest recursive residual is returned. Curvature ``p.Ap`` within
    round-off of zero (a numerically singular system, e.g. a sparsified
    Hessian of a near-permutation plan) stops the iteration early; clearly
    negative curvature raises :class:`ConjugateGradientError`.
    """
    b = np.asarray(b, dtype=np.float64)
    if isinstance(op, SparseHessian):
        return _cg_sparse(op, b, rel_tol, max_iters, jacobi)
    z = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return z, 0, 0.0
    tol = rel_tol * bnorm
    curv_tol = _curvature_floor(op)
    inv_d = 1.0 / op.full_diagonal() if jacobi else None
    res = b.copy()
    s = inv_d * res if jacobi else res
    p = s.copy()
    rs = float(res @ s)
    best, best_norm = z.copy(), bnorm
    it = 0
    for it in range(1, max_iters + 1):
        Ap = op.matvec(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise ConjugateGradientError("non-finite curvature in conjugate gradient")
        floor = curv_tol * float(p @ p)
        if pAp <= floor:
            if pAp < -floor:
                raise ConjugateGradientError(f"negative curvature {pAp:.3e}: operator is indefinite")
            log.debug("cg breakdown after %d iterations: singular direction", it)
            break
        a = rs / pAp
        z += a * p
        res -= a * Ap
        rnorm = float(np.linalg.norm(res))
        if not np.isfinite(rnorm):
            raise ConjugateGradientError("non-finite residual in conjugate gradient")
        if rnorm < best_norm:
            best, best_norm = z.copy(), rnorm
        if rnorm <= tol:
            break
        s = inv_d * res if jacobi else res
        rs_new = float(res @ s)
        p = s + (rs_new / rs) * p
        rs = rs_new
    if best_norm < float(np.linalg.norm(res)):
        z = best
    true_res = float(np.linalg.norm(op.matvec(z) - b))
    return z, it, true_res


def _curvature_floor(op) -> float:
    """Round-off level of ``p.Ap / |p|^2``: a few ulps of the largest diagonal entry."""
    return 1e-13 * float(np.max(np.abs(op.full_diagonal())))


def _cg_sparse(op: SparseHessian, b, rel_tol, max_iters, jacobi):
    inv_d = 1.0 / op.full_diagonal() if jacobi else np.ones_like(b)
    A, At = op.off_block, op.off_block_t
    z, it, status = _kernels.cg_block(
        op.diag, A.indptr, A.indices, A.data, At.indptr, At.indices, At.data,
        op.rank1, float(op.shift), b, float(rel_tol), int(max_iters), inv_d,
        _curvature_floor(op),
    )
    if status == 4:
        log.debug("cg breakdown after %d iterations: singular direction", it)
    if status == 2:
        raise ConjugateGradientError("non-finite value in conjugate gradient")
    if status == 3:
        raise ConjugateGradientError("negative curvature: operator is indefinite")
    return z, int(it), float(np.linalg.norm(op.matvec(z) - b))


def line_search(objective: Callable[[np.ndarray], float], z: np.ndarray, dz: np.ndarray,
                grad: np.ndarray, c1: float = 1e-4, shrink: float = 0.5,
                max_backtracks: int = 40,
                increment: Optional[Callable[[float], float]] = None) -> float:
    """Armijo backtracking for *maximization*; returns 0.0 on failure.

    ``increment(alpha)``, when given, must return
    ``objective(z + alpha dz) - objective(z)``; it replaces the two
    evaluations of ``objective`` and lets callers supply a
    cancellation-free formula.
    """
    z = np.asarray(z, dtype=np.float64)
    slope = float(np.dot(grad, dz))
    if not slope > 0.0:
        return 0.0
    if increment is None:
        f0 = objective(z)

        def increment(a):
            return objective(z + a * dz) - f0

    alpha = 1.0
    for _ in range(max_backtracks):
        gain = increment(alpha)
        if np.isfinite(gain) and gain >= c1 * alpha * slope:
            return alpha
        alpha *= shrink
    return 0.0


def project_balanced(duals: DualPotentials) -> DualPotentials:
    """Remove the component along ``v = [1; -1]`` so that ``sum x = sum y``."""
    n = duals.x.shape[0]
    shift = duals.imbalance() / (2 * n)
    return DualPotentials(duals.x - shift, duals.y + shift)


def converged(state: PotentialState, config: SolverConfig) -> tuple:
    """``(done, marginal_kl, l1_error)`` for the plan held by ``state``."""
    p = state.problem
    with np.errstate(divide="ignore"):
        # an underflowed marginal gives log 0 = -inf and an infinite divergence
        kl = float(np.sum(divergence_terms(p.r, np.log(state.row_sums)))
                   + np.sum(divergence_terms(p.c, np.log(state.col_sums))))
    l1 = float(np.sum(np.abs(state.row_sums - p.r)) + np.sum(np.abs(state.col_sums - p.c)))
    done = kl <= config.stop_marginal_kl or l1 <= config.stop_l1
    return done, kl, l1


def newton_direction(state: PotentialState, config: SolverConfig):
    """Sparsified Newton direction at ``state``; returns ``(dz, hessian)``."""
    problem = state.problem
    op = negated_hessian(problem, state.duals, augmented=config.augmented, state=state)
    if not config.augmented:
        op = HessianOperator(op.row_sums, op.col_sums, op.plan_block, op.eta,
                             rank1_correction=False, shift=1e-12 * problem.eta)
    H = sparsify(op, config.target_sparsity)
    b = state.augmented_gradient if config.augmented else state.gradient
    dz, cg_iters, res = conjugate_gradient(
        H, b, config.cg_rel_tol, config.cg_iters_for(problem.n), jacobi=config.jacobi
    )
    log.debug("cg: %d iterations, residual %.3e, nnz %d", cg_iters, res, H.nnz)
    return dz, H


def ascend(state: PotentialState, dz: np.ndarray, config: SolverConfig) -> float:
    """Armijo step size along ``dz`` on ``f_aug`` (or ``f``)."""
    aug = config.augmented
    grad = state.augmented_gradient if aug else state.gradient
    return line_search(
        None, state.duals.as_vector(), dz, grad,
        c1=config.armijo_c1, shrink=config.armijo_shrink,
        max_backtracks=config.armijo_max_backtracks,
        increment=lambda a: state.increment(dz, a, augmented=aug),
    )


def fallback(problem: Problem, duals: DualPotentials) -> DualPotentials:
    """Replacement for a failed line search: one Sinkhorn sweep, re-balanced."""
    return project_balanced(sinkhorn.sweep(problem, duals))


def run(problem: Problem, duals: DualPotentials, config: SolverConfig,
        trace: Optional[Trace] = None, stage: str = "newton",
        direction: Optional[Callable] = None) -> DualPotentials:
    """Newton stage from a warm start; stops early once the marginals match.

    ``direction(state, config) -> (dz, hessian_or_None)`` swaps the linear
    solver; the dense baseline reuses this loop that way.
    """
    config.check_for(problem.n)
    if trace is None:
        trace = NullTrace()
    if direction is None:
        direction = newton_direction
    z = project_balanced(duals)
    state = PotentialState.at(problem, z)
    for it in range(1, config.n2 + 1):
        done, _, _ = converged(state, config)
        if done:
            break
        dz, H = direction(state, config)
        if not np.all(np.isfinite(dz)):
            raise FloatingPointError("Newton direction is not finite")
        alpha = ascend(state, dz, config)
        if alpha > 0.0:
            z = DualPotentials.from_vector(z.as_vector() + alpha * dz)
        else:
            log.info("line search failed at %s iteration %d; Sinkhorn fallback", stage, it)
            z = fallback(problem, z)
        state = PotentialState.at(problem, z)
        _, kl, l1 = converged(state, config)
        sparsity = None if H is None else H.achieved_sparsity
        trace.record(stage, it, state.value, kl, l1, hessian_sparsity=sparsity, step_size=alpha)
    return z


def should_switch(prev_value: float, value: float, plan: LogPlan, target_sparsity: float,
                  eps_threshold: float = 0.1) -> bool:
    """Heuristic for leaving the Sinkhorn stage early.

    True once Sinkhorn has stalled (relative potential gain below
    ``10 * machine epsilon``) or the plan is already ``(lambda, 0.1)``-sparse.
    """
    gain = value - prev_value
    if gain <= 10 * np.finfo(float).eps * abs(value):
        return True
    _, eps = sparsity_profile(plan, target_sparsity)
    return eps <= eps_threshold


def solve(problem: Problem, config: SolverConfig, duals: Optional[DualPotentials] = None,
          trace: Optional[Trace] = None, dynamic_switch: bool = False) -> DualPotentials:
    """Full two-stage solve: ``n1`` Sinkhorn sweeps, then the sparse Newton stage.

    With ``dynamic_switch`` the Sinkhorn stage may end before ``n1`` sweeps
    (see :func:`should_switch`); ``n1`` is then an upper bound.
    """
    if duals is None:
        duals = DualPotentials.zeros(problem.n)
    if trace is None:
        trace = NullTrace()
    if not dynamic_switch:
        duals = sinkhorn.run(problem, duals, config.n1, trace)
    else:
        prev = potential(problem, duals)
        for it in range(1, config.n1 + 1):
            duals = sinkhorn.sweep(problem, duals)
            plan = LogPlan.from_duals(problem, duals)
            trace.add("sinkhorn", it, problem, duals, plan=plan)
            value = potential(problem, duals)
            if should_switch(prev, value, plan, config.target_sparsity):
                break
            prev = value
    return run(problem, duals, config, trace)
