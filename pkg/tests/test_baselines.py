import numpy as np
import pytest

from snsot import DualPotentials, SolverConfig, Trace
from snsot.baselines import dense_direction, lbfgs_maximize, run_dense_newton, run_lbfgs, two_loop
from snsot.lyapunov import PotentialState, negated_hessian
from snsot.problems import gen_random_assignment
from snsot.sinkhorn import run as sinkhorn_run
from snsot.sparse_newton import run as sns_run


def test_dense_newton_solves_one_by_one(one_by_one):
    tr = Trace()
    z = run_dense_newton(one_by_one, DualPotentials.zeros(1), SolverConfig(n2=10), tr)
    assert len(tr) <= 3
    assert z.imbalance() == pytest.approx(0.0, abs=1e-15)
    assert z.x[0] + z.y[0] == pytest.approx(1.0, abs=1e-12)


def test_dense_matches_full_sns_at_convergence():
    prob = gen_random_assignment(30, seed=5, eta=100.0)
    warm = sinkhorn_run(prob, DualPotentials.zeros(30), 20)
    a = run_dense_newton(prob, warm, SolverConfig(n2=50))
    b = sns_run(prob, warm, SolverConfig(n2=50, target_sparsity=1.0))
    assert np.linalg.norm(a.as_vector() - b.as_vector()) <= 1e-8


def test_dense_direction_solves_newton_system():
    prob = gen_random_assignment(8, seed=0, eta=10.0)
    s = PotentialState.at(prob, sinkhorn_run(prob, DualPotentials.zeros(8), 3))
    dz, _ = dense_direction(s, SolverConfig())
    H = negated_hessian(prob, s.duals, augmented=True, state=s).dense()
    assert np.allclose(H @ dz, s.augmented_gradient, rtol=1e-9, atol=1e-13)


def test_dense_survives_ill_conditioned_systems():
    prob = gen_random_assignment(40, seed=7, eta=4000.0)
    warm = sinkhorn_run(prob, DualPotentials.zeros(40), 20)
    tr = Trace()
    run_dense_newton(prob, warm, SolverConfig(n2=80), tr)
    assert tr.records[-1].marginal_kl < tr.records[0].marginal_kl


def test_dense_per_iteration_cost_grows_cubically():
    import time

    def per_iter(n):
        prob = gen_random_assignment(n, seed=1, eta=50.0)
        warm = sinkhorn_run(prob, DualPotentials.zeros(n), 5)
        cfg = SolverConfig(n2=3, stop_marginal_kl=0.0, stop_l1=0.0)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            run_dense_newton(prob, warm, cfg)
            best = min(best, time.perf_counter() - t0)
        return best / 3

    ratio = per_iter(400) / per_iter(100)
    assert 20 <= ratio <= 200, ratio


def test_two_loop_without_pairs_is_identity():
    g = np.array([1.0, -2.0])
    assert np.array_equal(two_loop(g, []), g)


def test_two_loop_satisfies_secant_equation():
    A = np.diag([1.0, 4.0])
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(2):
        s = rng.standard_normal(2)
        y = A @ s
        pairs.append((s, y, 1.0 / (s @ y)))
    s, y, _ = pairs[-1]
    assert np.allclose(two_loop(y, pairs), s, rtol=1e-12)


def test_lbfgs_quadratic():
    z, iters = lbfgs_maximize(lambda z: -0.5 * z @ z, lambda z: -z, np.array([1.0, 1.0]),
                              max_iters=10, gtol=1e-12)
    assert iters <= 3
    assert np.allclose(z, 0.0, atol=1e-12)


def test_lbfgs_rejects_zero_memory():
    with pytest.raises(ValueError, match="memory"):
        lbfgs_maximize(lambda z: 0.0, lambda z: z, np.zeros(1), memory=0)
    prob = gen_random_assignment(3, 0, 1.0)
    with pytest.raises(ValueError, match="memory"):
        run_lbfgs(prob, DualPotentials.zeros(3), 0, SolverConfig())


def test_lbfgs_on_ot_makes_progress():
    prob = gen_random_assignment(30, seed=2, eta=20.0)
    warm = sinkhorn_run(prob, DualPotentials.zeros(30), 10)
    tr = Trace()
    run_lbfgs(prob, warm, 10, SolverConfig(n2=200), tr)
    assert {r.stage for r in tr} == {"lbfgs"}
    assert tr.records[-1].marginal_kl < 1e-3 * tr.records[0].marginal_kl
