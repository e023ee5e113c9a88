import math

import numpy as np
import pytest

from snsot import LogPlan, SolverConfig
from snsot.oracle import (
    brute_force_assignment,
    dist_to_optimal_vertices,
    entropic_2x2_reference,
    sparsity_profile,
)
from snsot.problems import gen_random_assignment
from snsot.sparse_newton import solve


def recursive_min(cost, row=0, used=frozenset()):
    """Independent enumerator: best and all costs by depth-first assignment."""
    n = cost.shape[0]
    if row == n:
        return [0.0]
    out = []
    for j in range(n):
        if j not in used:
            out += [cost[row, j] + rest for rest in recursive_min(cost, row + 1, used | {j})]
    return out


def test_two_by_two_examples():
    res = brute_force_assignment([[0, 1], [1, 0]])
    assert res.optimal_cost == 0.0
    assert res.optimal_permutations == ((0, 1),)
    assert res.vertex_gap == 1.0
    tie = brute_force_assignment(np.zeros((2, 2)))
    assert len(tie.optimal_permutations) == 2 and tie.vertex_gap is None and not tie.unique


@pytest.mark.parametrize("seed", range(5))
def test_matches_recursive_enumeration(seed):
    C = np.random.default_rng(seed).random((3 + seed % 3, 3 + seed % 3))
    n = C.shape[0]
    totals = sorted(set(np.round(np.array(recursive_min(C)) / n, 14)))
    res = brute_force_assignment(C)
    assert res.optimal_cost == pytest.approx(totals[0], abs=1e-13)
    assert res.vertex_gap == pytest.approx(totals[1] - totals[0], abs=1e-13)


def test_size_guard():
    with pytest.raises(ValueError, match="too large"):
        brute_force_assignment(np.zeros((11, 11)))


def test_dist_examples():
    res = brute_force_assignment([[0, 1], [1, 0]])
    assert dist_to_optimal_vertices(LogPlan.from_plan(np.eye(2) / 2), res) == 0.0
    assert dist_to_optimal_vertices(LogPlan.from_plan(np.full((2, 2), 0.25)), res) == 1.0


def test_converged_plan_inside_exponential_envelope():
    n = 5
    seed = next(s for s in range(100) if brute_force_assignment(
        gen_random_assignment(n, s).cost).unique)
    prob = gen_random_assignment(n, seed, eta=40.0 * n)
    res = brute_force_assignment(prob.cost)
    z = solve(prob, SolverConfig(n1=20, n2=50))
    dist = dist_to_optimal_vertices(LogPlan.from_duals(prob, z), res)
    assert dist <= 6 * n * n * math.exp(-prob.eta * res.vertex_gap) + 1e-3


def test_sparsity_profile_examples():
    n = 5
    V = np.eye(n)[[2, 0, 1, 4, 3]] / n
    with np.errstate(divide="ignore"):
        assert sparsity_profile(LogPlan.from_plan(V), 1 / n) == (1 / n, 0.0)
    tau, eps = sparsity_profile(LogPlan.from_plan(np.full((n, n), 1 / n ** 2)), 1 / n)
    assert tau == 1 / n and eps == pytest.approx(1 - 1 / n, rel=1e-14)


def test_converged_desk_scale_plan_is_sparse():
    prob = gen_random_assignment(100, seed=7, eta=400.0)
    z = solve(prob, SolverConfig(n1=20, n2=60, target_sparsity=1.0))
    _, eps = sparsity_profile(LogPlan.from_duals(prob, z), 2 / 100)
    assert eps <= 0.01


def test_two_by_two_reference():
    P = entropic_2x2_reference(4.0)
    assert P[0, 0] == pytest.approx(0.5 / (1 + math.exp(-4)), rel=1e-15)
    assert P[0, 0] == pytest.approx(0.49101, abs=1e-5)
    assert np.allclose(P.sum(0), 0.5) and np.allclose(P.sum(1), 0.5)
    assert np.allclose(entropic_2x2_reference(1e-9), 0.25, atol=1e-9)


def test_reference_is_the_entropic_minimizer():
    """Grid search over the one-parameter feasible family."""
    eta = 3.0
    p = np.linspace(1e-6, 0.5 - 1e-6, 200_001)
    q = 0.5 - p
    obj = 2 * q + (2 / eta) * (p * np.log(p) + q * np.log(q))
    assert p[np.argmin(obj)] == pytest.approx(entropic_2x2_reference(eta)[0, 0], abs=5e-6)
