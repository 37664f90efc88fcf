import numpy as np
import pytest

from cadelac import ekf
from cadelac import rigid_body as rb
from cadelac.harness import ik_solve
from cadelac.mpc import Measurement
from helpers import fd_jacobian, rel_err


@pytest.fixture
def cfg():
    return ekf.EkfConfig.default(3)


def test_transition_jacobian_matches_finite_differences(model, cfg, rng):
    x = np.concatenate([rng.normal(size=6), 5 * rng.normal(size=2)])
    tau = 10 * rng.normal(size=3)
    val, F = ekf.transition_jacobian(model, x, tau, cfg)
    np.testing.assert_allclose(val, ekf.transition(model, x, tau, cfg), atol=1e-13)
    assert rel_err(F, fd_jacobian(lambda v: ekf.transition(model, v, tau, cfg), x)) < 1e-5


def test_force_enters_through_jacobian_transpose(model, rng):
    q, dq, tau, f = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.normal(size=2)
    _, J = rb.ee_kinematics(model, q)
    rhs = ekf.augmented_rhs(model)(np.concatenate([q, dq, f]), tau)
    np.testing.assert_allclose(rhs[3:6], rb.forward_dynamics(model, q, dq, tau + J.T @ f), atol=1e-12)
    np.testing.assert_allclose(rhs[6:], 0.0)


def test_scalar_update_matches_closed_form():
    c = ekf.EkfConfig(np.zeros(2), np.array([0.5]))
    st = ekf.EkfState(np.array([1.0, 7.0]), np.diag([2.0, 3.0]))
    out = ekf.ekf_update(st, [3.0], c)
    assert out.x[0] == pytest.approx(1.0 + 2.0 / 2.5 * 2.0)
    assert out.P[0, 0] == pytest.approx(2.0 * 0.5 / 2.5)
    assert out.x[1] == 7.0 and out.P[1, 1] == 3.0


def test_joseph_form_equals_standard_form_for_optimal_gain(rng):
    M = rng.normal(size=(8, 8))
    P = M @ M.T + np.eye(8)
    c = ekf.EkfConfig(np.ones(8), rng.uniform(0.01, 1.0, 6))
    st = ekf.EkfState(rng.normal(size=8), P)
    y = rng.normal(size=6)
    out = ekf.ekf_update(st, y, c)
    Hm = np.eye(6, 8)
    K = P @ Hm.T @ np.linalg.inv(Hm @ P @ Hm.T + np.diag(c.r_diag))
    np.testing.assert_allclose(out.x, st.x + K @ (y - Hm @ st.x), atol=1e-10)
    np.testing.assert_allclose(out.P, (np.eye(8) - K @ Hm) @ P, atol=1e-10)


def test_limits_of_measurement_and_prior_confidence(rng):
    x = rng.normal(size=8)
    y = rng.normal(size=6)
    noisy = ekf.EkfConfig(np.ones(8), np.full(6, 1e12))
    out = ekf.ekf_update(ekf.EkfState(x, np.eye(8)), y, noisy)
    np.testing.assert_allclose(out.x, x, atol=1e-10)
    certain = ekf.ekf_update(ekf.EkfState(x, np.zeros((8, 8))), y, ekf.EkfConfig(np.ones(8), np.ones(6)))
    np.testing.assert_array_equal(certain.x, x)


def test_singular_innovation_skips_update():
    c = ekf.EkfConfig(np.zeros(2), np.array([1e-300]))
    st = ekf.EkfState(np.zeros(2), np.zeros((2, 2)))
    st.P[0, 0] = -1e-300  # S = P + R = 0 exactly
    out = ekf.ekf_update(st, [1.0], c)
    assert out.update_failed and np.all(out.x == st.x)


def hold_and_filter(model, env, q, seconds=2.0, cfg=None):
    """Hold the loaded arm still with exact gravity torque and feed the EKF its measurements."""
    cfg = cfg or ekf.EkfConfig.default(3)
    true = rb.apply_payload(model, env)
    tau = rb.gravity_vector(true, q)
    filt = ekf.ExternalForceEkf(model, cfg)
    filt.observe(Measurement(0.0, q, np.zeros(3), None))
    for k in range(1, int(round(seconds / cfg.dt)) + 1):
        tau_ext = filt.observe(Measurement(k * cfg.dt, q, np.zeros(3), tau))
    return filt, tau_ext


def test_static_payload_force_estimate(model):
    m = 1.4
    q = np.array([0.3, 0.6, -0.4])
    filt, tau_ext = hold_and_filter(model, rb.EnvironmentSpec(m, (0.0, 0.0)), q)
    f = filt.state.force
    assert abs(f[1] - (-m * model.gravity)) <= 0.05 * m * model.gravity
    assert abs(f[0]) <= 0.05 * m * model.gravity
    np.linalg.cholesky(filt.state.P + 1e-12 * np.eye(8))


def test_joint_torque_vanishes_with_tip_above_base(model):
    """A vertical tip force has no moment about the base joint when the tip is directly above it."""
    q, err = ik_solve(model, np.array([0.0, 0.8]), np.array([1.2, 1.0, 0.8]))
    assert err < 1e-9
    assert abs(rb.ee_position(model, q)[0]) < 1e-9
    _, tau_ext = hold_and_filter(model, rb.EnvironmentSpec(1.4, (0.0, 0.0)), q)
    assert abs(tau_ext[0]) <= 0.05 * np.abs(tau_ext).max()


def test_config_validation():
    with pytest.raises(ValueError):
        ekf.EkfConfig(np.ones(8), np.zeros(6))
    with pytest.raises(ValueError):
        ekf.EkfConfig(np.ones(8), np.ones(6), substeps=0)
    c = ekf.EkfConfig.default(3)
    assert ekf.EkfConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()
    with pytest.raises(ValueError):
        ekf.EkfState(np.zeros(3), np.eye(2))
