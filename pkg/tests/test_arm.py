import numpy as np
import pytest

from gpcal.arm import (FieldTerm, MeasurementModel, PerturbationSpec, ResidualField, apply_deltas,
                       draw_deltas, measure, pose_difference, realize, residual, true_vectors)
from gpcal.errors import DomainError
from gpcal.kinematics import fk_vectors
from gpcal.robots import builtin


def test_zero_perturbation_zero_residual():
    rb = builtin("wam7")
    arm = realize(rb.table, PerturbationSpec())
    q = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(residual(arm, rb.table, q), 0.0, atol=1e-15)


def test_fixed_deltas_applied_in_column_order():
    rb = builtin("planar2")
    d = np.zeros((2, 4))
    d[0] = [0.01, 0.02, 0.03, 0.04]  # theta, alpha, d, a
    t = apply_deltas(rb.table, d)
    lk = t.links[0]
    assert (lk.theta0, lk.alpha, lk.d, lk.a) == pytest.approx((0.01, 0.02, 0.03, 1.04))


def test_scaled_draw_within_bounds():
    rb = builtin("lander6")
    spec = PerturbationSpec("scaled", percent=50)
    d = draw_deltas(rb.table, spec, 3, rb.uncertainty)
    assert np.all(np.abs(d) <= 0.5 * rb.uncertainty)
    np.testing.assert_array_equal(d, draw_deltas(rb.table, spec, 3, rb.uncertainty))


def test_sampled_uniform_bounds_checked():
    with pytest.raises(DomainError):
        PerturbationSpec("sampled-uniform", lower=[[0, 0, 0, 1]], upper=[[0, 0, 0, 0]])


def test_scaled_needs_uncertainty():
    rb = builtin("planar2")
    with pytest.raises(DomainError):
        draw_deltas(rb.table, PerturbationSpec("scaled", percent=10), 0)


def test_field_added_to_true_pose():
    rb = builtin("planar2")
    g = ResidualField((FieldTerm(4, 0.1, (1.0, 0.0)),))
    arm = realize(rb.table, PerturbationSpec(additive_residual=g))
    q = np.array([0.3, 0.2])
    r = residual(arm, rb.table, q)
    assert r[4] == pytest.approx(0.1 * np.sin(0.3))
    np.testing.assert_allclose(true_vectors(arm, q)[0], fk_vectors(rb.table, q)[0] + g(q), atol=1e-15)


def test_noise_stream_reproducible_and_skippable():
    rb = builtin("planar2")
    mk = lambda: realize(rb.table, PerturbationSpec(), measurement=MeasurementModel((0.1,) * 7, 5))
    a, b = mk(), mk()
    q = np.zeros(2)
    np.testing.assert_array_equal(measure(a, q).vector, measure(b, q).vector)
    clean = measure(a, q, noiseless=True).vector
    np.testing.assert_allclose(clean, fk_vectors(rb.table, q)[0], atol=1e-15)
    np.testing.assert_array_equal(measure(a, q).vector, measure(b, q).vector)


def test_measured_quaternion_unit():
    rb = builtin("wam7")
    arm = realize(rb.table, PerturbationSpec(), measurement=MeasurementModel((0.05,) * 7, 1))
    for q in np.random.default_rng(0).uniform(-1.5, 1.5, (20, 7)):
        assert np.linalg.norm(measure(arm, q).quat) == pytest.approx(1.0, abs=1e-12)


def test_pose_difference_aligns_hemisphere():
    a = np.array([1.0, 0, 0, 0, 1, 2, 3])
    b = a.copy()
    b[:4] = -b[:4]
    np.testing.assert_allclose(pose_difference(b, a), 0.0, atol=1e-15)


def test_negative_noise_rejected():
    with pytest.raises(DomainError):
        MeasurementModel((-0.1,) * 7)
