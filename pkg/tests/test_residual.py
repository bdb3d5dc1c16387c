import numpy as np
import pytest

from gpcal import gp
from gpcal.acquisition import grid_pool, run_campaign
from gpcal.arm import MeasurementModel, PerturbationSpec, realize, residual
from gpcal.errors import NotFittedError
from gpcal.kinematics import fk_vectors
from gpcal.residual import (DEFAULT_HYPER, RefitPolicy, ResidualModel, corrected_fk,
                            corrected_vectors, fit_residuals, from_snapshot, holdout_error,
                            predict_batch, predict_residual, snapshot, update)
from gpcal.robots import builtin

NEVER = RefitPolicy.never()


def planar_arm(deltas=None, noise=0.0, field=None, seed=0):
    rb = builtin("planar2")
    spec = PerturbationSpec("fixed", deltas=deltas, additive_residual=field)
    return rb, realize(rb.table, spec, measurement=MeasurementModel((noise,) * 7, seed))


def a1_offset(v):
    d = np.zeros((2, 4))
    d[0, 3] = v
    return d


def test_first_update_interpolates():
    rb, arm = planar_arm(a1_offset(0.2))
    q = np.array([0.5, -0.3])
    r = residual(arm, rb.table, q)
    m = update(ResidualModel.empty(rb.table), q, r, NEVER)
    np.testing.assert_allclose(predict_residual(m, q).mean, r, atol=1e-5)


def test_update_is_functional():
    rb, arm = planar_arm(a1_offset(0.2))
    m0 = ResidualModel.empty(rb.table)
    m1 = update(m0, [0.1, 0.2], residual(arm, rb.table, [0.1, 0.2]), NEVER)
    assert len(m0) == 0 and len(m1) == 1


def test_repeated_input_both_kept():
    rb, arm = planar_arm(a1_offset(0.2), noise=0.05, seed=3)
    q = np.array([0.2, 0.4])
    h = gp.Hyperparams(1.0, 1.0, 0.0, 0.05)
    m = ResidualModel.empty(rb.table, h)
    r1, r2 = residual(arm, rb.table, q), residual(arm, rb.table, q)
    m = update(update(m, q, r1, NEVER), q, r2, NEVER)
    assert len(m) == 2
    mean = predict_residual(m, q).mean
    lo, hi = np.minimum(r1, r2), np.maximum(r1, r2)
    assert np.all(mean >= lo - 1e-12) and np.all(mean <= hi + 1e-12)


def test_far_point_reverts_to_signal_std():
    rb, arm = planar_arm(a1_offset(0.2))
    m = update(ResidualModel.empty(rb.table), [0, 0], residual(arm, rb.table, [0, 0]), NEVER)
    std = predict_residual(m, [100.0, 100.0]).std
    np.testing.assert_allclose(std, [h.signal_std for h in m.hypers], rtol=1e-2)


def test_three_observations_match_dense_solve():
    rb, arm = planar_arm(a1_offset(0.1))
    Q = np.array([[0.1, 0.2], [0.7, -0.4], [-1.0, 1.2]])
    m = ResidualModel.empty(rb.table)
    for q in Q:
        m = update(m, q, residual(arm, rb.table, q), NEVER)
    h = DEFAULT_HYPER
    K = np.exp(-0.5 * ((Q[:, None] - Q[None]) ** 2).sum(-1) / h.lengthscale[0] ** 2) + h.nugget * np.eye(3)
    xs = np.array([0.3, 0.3])
    ks = np.exp(-0.5 * ((xs - Q) ** 2).sum(-1) / h.lengthscale[0] ** 2)
    oracle = ks @ np.linalg.solve(K, m.targets)
    np.testing.assert_allclose(predict_residual(m, xs).mean, oracle, atol=1e-10)
    np.testing.assert_allclose(predict_batch(m, xs[None])[0][0], oracle, atol=1e-10)


def test_axes_share_training_inputs():
    rb, arm = planar_arm(a1_offset(0.2))
    m = ResidualModel.empty(rb.table)
    for q in np.random.default_rng(0).uniform(-3, 3, (6, 2)):
        m = update(m, q, residual(arm, rb.table, q))
    for g in m.gps:
        np.testing.assert_array_equal(g.data.inputs, m.inputs)


def test_std_non_increasing_with_fixed_hyperparameters():
    rb, arm = planar_arm(a1_offset(0.2))
    probe = np.array([[0.3, -0.8]])
    m = ResidualModel.empty(rb.table)
    prev = np.full(7, np.inf)
    for q in np.random.default_rng(1).uniform(-3, 3, (15, 2)):
        m = update(m, q, residual(arm, rb.table, q), NEVER)
        std = predict_batch(m, probe)[1][0]
        assert np.all(std <= prev + 1e-12)
        prev = std


def test_zero_residual_model_is_nominal():
    rb, arm = planar_arm()
    m = ResidualModel.empty(rb.table)
    Q = np.random.default_rng(2).uniform(-3, 3, (8, 2))
    for q in Q:
        m = update(m, q, residual(arm, rb.table, q))
    P = np.random.default_rng(3).uniform(-3, 3, (20, 2))
    np.testing.assert_allclose(corrected_vectors(m, P), fk_vectors(rb.table, P), atol=1e-9)


def test_corrected_quaternion_unit_norm():
    rb = builtin("wam7")
    spec = PerturbationSpec("scaled", percent=100)
    arm = realize(rb.table, spec, 0, rb.uncertainty)
    Q = np.random.default_rng(4).uniform(-1.5, 1.5, (10, 7))
    m = fit_residuals(rb.table, Q, [residual(arm, rb.table, q) for q in Q])
    F = corrected_vectors(m, np.random.default_rng(5).uniform(-1.5, 1.5, (50, 7)))
    np.testing.assert_allclose(np.linalg.norm(F[:, :4], axis=1), 1.0, atol=1e-9)


def test_empty_model_prediction_raises():
    with pytest.raises(NotFittedError):
        predict_residual(ResidualModel.empty(builtin("planar2").table), [0, 0])


def test_empty_model_holdout_equals_uncalibrated():
    rb, arm = planar_arm(a1_offset(0.2))
    H = np.linspace([-2, 2], [2, -2], 10)
    res = holdout_error(ResidualModel.empty(rb.table), arm, H)
    np.testing.assert_allclose(res.err_cal, res.err_uncal)


def test_perfect_model_zero_error():
    rb, arm = planar_arm()
    H = np.linspace([-2, 2], [2, -2], 10)
    assert np.max(holdout_error(ResidualModel.empty(rb.table), arm, H).err_cal) == 0.0


def test_more_data_lowers_holdout_error():
    rb, arm = planar_arm(a1_offset(0.2))
    H = np.linspace([-2.4, 2.4], [2.4, -2.4], 50)
    Q = np.random.default_rng(6).uniform(-3, 3, (30, 2))
    m = ResidualModel.empty(rb.table)
    errs = []
    for q in Q:
        m = update(m, q, residual(arm, rb.table, q))
        errs.append(holdout_error(m, arm, H).mean_cal)
    assert errs[-1] < errs[0]


def test_campaign_recovers_tool_position():
    rb, arm = planar_arm(a1_offset(0.2))
    pool = grid_pool(rb.table.joint_limits, 41)
    rec = run_campaign(arm, rb.table, pool, "gp-ucb", 30, seed=0)
    m = from_snapshot(rb.table, rec.model_snapshot)
    assert corrected_fk(m, [0.0, 0.0]).pos[0] == pytest.approx(2.2, abs=0.02)


def test_snapshot_round_trip():
    rb, arm = planar_arm(a1_offset(0.2))
    Q = np.random.default_rng(7).uniform(-3, 3, (5, 2))
    m = fit_residuals(rb.table, Q, [residual(arm, rb.table, q) for q in Q])
    m2 = from_snapshot(rb.table, snapshot(m))
    P = np.random.default_rng(8).uniform(-3, 3, (10, 2))
    np.testing.assert_allclose(corrected_vectors(m2, P), corrected_vectors(m, P), atol=1e-12)


def test_refit_schedules():
    every = RefitPolicy(every=5, warmup=5)
    assert [c for c in range(1, 31) if every.optimizes_at(c)] == [1, 2, 3, 4, 5, 10, 15, 20, 25, 30]
    doubling = RefitPolicy(every=5, warmup=5, schedule="doubling")
    assert [c for c in range(1, 41) if doubling.optimizes_at(c)] == [1, 2, 3, 4, 5, 10, 20, 40]
    assert not any(NEVER.optimizes_at(c) for c in range(1, 20))
