import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcal.arm import apply_deltas
from gpcal.kinematics import fk_vectors
from gpcal.linearized import (QPProblem, RankDeficientWarning, calibrate_linearized,
                              enumerate_active_sets, projected_gradient_norm, solve_qp,
                              uncertainty_bounds)
from gpcal.robots import builtin


def random_problem(rng, rows=21, n=3, scale=1.0):
    J = rng.standard_normal((rows, n))
    r = rng.standard_normal(rows) * scale
    lb = -rng.uniform(0.05, 1.0, n)
    ub = rng.uniform(0.05, 1.0, n)
    return QPProblem(J, r, lb, ub)


def test_identity_inside_bounds():
    J = np.vstack([np.eye(3), np.zeros((4, 3))])
    r = np.array([0.1, -0.2, 0.3, 0, 0, 0, 0])
    sol = solve_qp(QPProblem(J, r, -1, 1))
    np.testing.assert_allclose(sol.x, r[:3], atol=1e-12)
    assert sol.converged


def test_active_upper_bound_clamps():
    J = np.vstack([np.eye(3), np.zeros((4, 3))])
    r = np.array([2.0, -0.2, 0.3, 0, 0, 0, 0])
    sol = solve_qp(QPProblem(J, r, -1, 1))
    np.testing.assert_allclose(sol.x, [1.0, -0.2, 0.3], atol=1e-12)


def test_three_parameter_instance_matches_enumeration():
    p = random_problem(np.random.default_rng(0), scale=3.0)
    np.testing.assert_allclose(solve_qp(p).x, enumerate_active_sets(p), atol=1e-6)


def test_nine_parameter_instance_matches_enumeration():
    # 3^9 bound-activity patterns
    p = random_problem(np.random.default_rng(1), rows=21, n=9, scale=3.0)
    np.testing.assert_allclose(solve_qp(p).x, enumerate_active_sets(p), atol=1e-6)


def test_unconstrained_matches_normal_equations():
    rng = np.random.default_rng(2)
    J = rng.standard_normal((28, 6))
    r = rng.standard_normal(28)
    x_ne = np.linalg.solve(J.T @ J, J.T @ r)
    sol = solve_qp(QPProblem(J, r, -1e6, 1e6))
    np.testing.assert_allclose(sol.x, x_ne, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_solution_always_feasible(seed, n):
    p = random_problem(np.random.default_rng(seed), rows=7 * n, n=n, scale=5.0)
    x = solve_qp(p).x
    assert np.all(x >= p.lb) and np.all(x <= p.ub)


def test_projected_gradient_small_at_solution():
    p = random_problem(np.random.default_rng(3), n=5, scale=2.0)
    sol = solve_qp(p)
    assert projected_gradient_norm(p, sol.x) <= 1e-8 * max(1.0, np.linalg.norm(p.jacobian.T @ p.residual))


def test_problem_validation():
    with pytest.raises(ValueError):
        QPProblem(np.ones((6, 2)), np.ones(6), -1, 1)
    with pytest.raises(ValueError):
        QPProblem(np.ones((7, 2)), np.ones(7), 1, -1)


def test_uncertainty_bounds_drop_theta_column():
    lb, ub = uncertainty_bounds([[9.0, 0.1, 0.2, 0.3]], 50)
    np.testing.assert_allclose(ub, [0.05, 0.1, 0.15])
    np.testing.assert_allclose(lb, -ub)


def _measure(table, Q):
    return [(q, f) for q, f in zip(Q, fk_vectors(table, Q))]


def _poses(n, k, seed, limit=2.5):
    return np.random.default_rng(seed).uniform(-limit, limit, (k, n))


def test_zero_perturbation_converges_immediately():
    rb = builtin("wam7")
    Q = _poses(7, 10, 0, 1.4)
    res = calibrate_linearized(rb.table, _measure(rb.table, Q))
    assert res.iterations == 1 and res.converged
    np.testing.assert_allclose(res.phi_star, rb.table.phi(), atol=1e-10)


def test_recovers_link_length_offset():
    rb = builtin("planar2")
    deltas = np.zeros((2, 4))
    deltas[0, 3] = 0.02
    true = apply_deltas(rb.table, deltas)
    Q = _poses(2, 10, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        res = calibrate_linearized(rb.table, _measure(true, Q))
    assert res.table.links[0].a == pytest.approx(1.02, abs=1e-4)
    H = np.linspace([-2, 2], [2, -2], 50)
    before = np.linalg.norm(fk_vectors(true, H) - fk_vectors(rb.table, H), axis=1).mean()
    after = np.linalg.norm(fk_vectors(true, H) - res.predict(H), axis=1).mean()
    assert after <= 0.05 * before


def test_history_non_increasing():
    rb = builtin("lander6")
    rng = np.random.default_rng(4)
    deltas = rng.uniform(-1, 1, (6, 4)) * rb.uncertainty * 0.5
    deltas[:, 0] = 0.0
    true = apply_deltas(rb.table, deltas)
    # parallel joint axes make some d offsets indistinguishable
    with pytest.warns(RankDeficientWarning):
        res = calibrate_linearized(rb.table, _measure(true, _poses(6, 15, 5, 1.4)))
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    assert res.residual_norm < 1e-8


def test_theta_offset_not_identifiable():
    rb = builtin("planar2")
    deltas = np.zeros((2, 4))
    deltas[0, 0] = 0.05
    true = apply_deltas(rb.table, deltas)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        res = calibrate_linearized(rb.table, _measure(true, _poses(2, 10, 6)))
    assert res.residual_norm > 1e-3


def test_rank_deficiency_warned():
    # the two d columns of a planar arm both translate along z
    rb = builtin("planar2")
    with pytest.warns(RankDeficientWarning):
        calibrate_linearized(rb.table, _measure(rb.table, _poses(2, 10, 7)))


def test_too_few_measurements_rejected():
    rb = builtin("wam7")
    with pytest.raises(ValueError, match="at least"):
        calibrate_linearized(rb.table, _measure(rb.table, _poses(7, 2, 8, 1.4)))


def test_bounds_limit_total_correction():
    rb = builtin("planar2")
    deltas = np.zeros((2, 4))
    deltas[0, 3] = 0.3
    true = apply_deltas(rb.table, deltas)
    lb, ub = uncertainty_bounds(rb.uncertainty)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        res = calibrate_linearized(rb.table, _measure(true, _poses(2, 10, 9)), bounds=(lb, ub))
    dphi = res.phi_star - rb.table.phi()
    assert np.all(dphi >= lb - 1e-12) and np.all(dphi <= ub + 1e-12)
    assert dphi[2] == pytest.approx(0.2)
