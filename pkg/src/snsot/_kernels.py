"""Compiled CSR kernels for the sparse Newton system.

The operator is ``diag + [[0, B], [B^T, 0]] (+ v v^T) + shift I`` with ``B``
given twice in CSR form (``B`` and ``B^T``) so both products are row
gathers. Loops run in a fixed order, so results are bitwise reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def csr_matvec(indptr, indices, data, u, out):
    """``out += A @ u`` for a CSR matrix ``A``."""
    for i in range(indptr.shape[0] - 1):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * u[indices[k]]
        out[i] += acc


@njit(cache=True)
def block_matvec(diag, indptr, indices, data, indptr_t, indices_t, data_t,
                 rank1, shift, u, out):
    n = indptr.shape[0] - 1
    for i in range(2 * n):
        out[i] = (diag[i] + shift) * u[i]
    csr_matvec(indptr, indices, data, u[n:], out[:n])
    csr_matvec(indptr_t, indices_t, data_t, u[:n], out[n:])
    if rank1:
        s = 0.0
        for i in range(n):
            s += u[i]
        for i in range(n, 2 * n):
            s -= u[i]
        for i in range(n):
            out[i] += s
        for i in range(n, 2 * n):
            out[i] -= s


@njit(cache=True)
def _dot(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


@njit(cache=True)
def cg_block(diag, indptr, indices, data, indptr_t, indices_t, data_t, rank1, shift,
             b, rel_tol, max_iters, inv_d, curv_tol):
    """Conjugate gradient on the block operator.

    ``inv_d`` is the Jacobi preconditioner (an array of ones disables it).
    Returns ``(z, iterations, status)`` with status 0 converged, 1 iteration
    cap, 2 non-finite value, 3 negative curvature, 4 breakdown on a
    numerically singular direction (``|p.Ap| <= curv_tol |p|^2``).
    """
    m = b.shape[0]
    z = np.zeros(m)
    best = np.zeros(m)
    bnorm = np.sqrt(_dot(b, b))
    if bnorm == 0.0:
        return z, 0, 0
    tol = rel_tol * bnorm
    res = b.copy()
    s = res * inv_d
    p = s.copy()
    Ap = np.empty(m)
    rs = _dot(res, s)
    best_norm = bnorm
    status = 1
    it = 0
    while it < max_iters:
        it += 1
        block_matvec(diag, indptr, indices, data, indptr_t, indices_t, data_t,
                     rank1, shift, p, Ap)
        pAp = _dot(p, Ap)
        if not np.isfinite(pAp):
            status = 2
            break
        # curvature at round-off level means a (numerically) singular system
        floor = curv_tol * _dot(p, p)
        if pAp <= floor:
            status = 3 if pAp < -floor else 4
            break
        a = rs / pAp
        for i in range(m):
            z[i] += a * p[i]
            res[i] -= a * Ap[i]
        rnorm = np.sqrt(_dot(res, res))
        if not np.isfinite(rnorm):
            status = 2
            break
        if rnorm < best_norm:
            best_norm = rnorm
            best[:] = z
        if rnorm <= tol:
            status = 0
            break
        for i in range(m):
            s[i] = res[i] * inv_d[i]
        rs_new = _dot(res, s)
        beta = rs_new / rs
        for i in range(m):
            p[i] = s[i] + beta * p[i]
        rs = rs_new
    if best_norm < np.sqrt(_dot(res, res)):
        z[:] = best
    return z, it, status


@njit(cache=True)
def curvature_remainder(plan, dx, dy, scale):
    """``sum_ij P_ij (e^u - 1 - u)`` with ``u = scale (dx_i + dy_j)``."""
    n = plan.shape[0]
    total = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            p = plan[i, j]
            if p == 0.0:
                continue
            u = scale * (dx[i] + dy[j])
            if abs(u) < 1e-3:
                phi = u * u * (0.5 + u * (1.0 / 6.0 + u * (1.0 / 24.0 + u / 120.0)))
            else:
                phi = np.expm1(u) - u
            acc += p * phi
        total += acc
    return total


@njit(cache=True)
def threshold_csr(block, cutoff, scale):
    """CSR arrays of ``scale * block`` restricted to entries ``block >= cutoff``."""
    n = block.shape[0]
    indptr = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        c = 0
        for j in range(n):
            if block[i, j] >= cutoff:
                c += 1
        indptr[i + 1] = indptr[i] + c
    nnz = indptr[n]
    indices = np.empty(nnz, dtype=np.int64)
    data = np.empty(nnz)
    k = 0
    for i in range(n):
        for j in range(n):
            if block[i, j] >= cutoff:
                indices[k] = j
                data[k] = block[i, j] * scale
                k += 1
    return indptr, indices, data

