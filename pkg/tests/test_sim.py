import math

import numpy as np
import pytest
import scipy.linalg

from cadelac import rigid_body as rb
from cadelac import sim
from cadelac.config import ExperimentConfig
from helpers import fd_jacobian


@pytest.fixture(scope="module")
def desk():
    return ExperimentConfig.builtin("desk")


def linear_rhs(A):
    return lambda x, u: x @ A.T + u


def test_rk4_single_step_is_fourth_order_taylor(rng):
    A = rng.normal(size=(4, 4))
    x = rng.normal(size=4)
    h = 0.05
    M = sum(np.linalg.matrix_power(A * h, k) / math.factorial(k) for k in range(5))
    np.testing.assert_allclose(sim.rk4(linear_rhs(A), x, np.zeros(4), h), M @ x, atol=1e-13)


def test_rk4_global_error_ratio(rng):
    """Halving the step cuts the global error by about 2^4 = 16."""
    A = np.array([[0.0, 1.0], [-4.0, -0.3]])
    x0 = np.array([1.0, 0.0])
    exact = scipy.linalg.expm(A * 2.0) @ x0

    def run(h):
        x = x0
        for _ in range(int(round(2.0 / h))):
            x = sim.rk4(linear_rhs(A), x, np.zeros(2), h)
        return np.linalg.norm(x - exact)

    ratio = run(0.02) / run(0.01)
    assert 14 < ratio < 18


def test_step_flags_divergence(model):
    state = rb.JointState(np.zeros(3), np.zeros(3))
    with pytest.raises(sim.SimulationDiverged):
        sim.step(model, state, np.array([np.nan, 0, 0]), 1e-3)


def test_chirp_derivatives_and_period(desk, rng):
    p = sim.sample_chirp_params(rng, desk.collect.limits)
    t = rng.uniform(0, 10, 5)
    q, dq = sim.chirp_reference(p, t)
    for k, tk in enumerate(t):
        np.testing.assert_allclose(dq[k], fd_jacobian(lambda s: sim.chirp_reference(p, s[0])[0], [tk])[:, 0],
                                   atol=1e-7)
        np.testing.assert_allclose(sim.chirp_acceleration(p, tk),
                                   fd_jacobian(lambda s: sim.chirp_reference(p, s[0])[1], [tk])[:, 0], atol=1e-7)
    q2, dq2 = sim.chirp_reference(p, t + p.period)
    np.testing.assert_allclose(q2, q, atol=1e-12)
    np.testing.assert_allclose(dq2, dq, atol=1e-12)
    with pytest.raises(ValueError):
        sim.chirp_reference(p, -0.1)


def test_sampled_chirps_respect_limits_on_dense_grid(desk):
    lim = desk.collect.limits
    rng = np.random.default_rng(7)
    t = np.linspace(0, lim.period, 20_001)
    for _ in range(1000):
        p = sim.sample_chirp_params(rng, lim)
        q, dq = sim.chirp_reference(p, t)
        assert np.all(q >= lim.q_min) and np.all(q <= lim.q_max)
        assert np.all(dq >= lim.dq_min) and np.all(dq <= lim.dq_max)


def test_chirp_sampler_gives_up_on_impossible_limits(desk):
    d = desk.collect.limits.to_dict()
    d.update(dq_min=[-1e-3] * 3, dq_max=[1e-3] * 3, max_attempts=5)
    with pytest.raises(RuntimeError):
        sim.sample_chirp_params(np.random.default_rng(0), sim.ChirpLimits.from_dict(d))


def test_lqr_matches_value_iteration():
    dt, qp, qv, r = 0.02, 100.0, 100.0, 0.05
    K, P = sim.double_integrator_lqr(dt, qp, qv, r)
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    Q, R = np.diag([qp, qv]), np.array([[r]])
    # independent oracle: plain value iteration from P = Q
    V = Q.copy()
    for _ in range(20_000):
        S = R + B.T @ V @ B
        V_next = Q + A.T @ V @ A - A.T @ V @ B @ np.linalg.inv(S) @ B.T @ V @ A
        if np.max(np.abs(V_next - V)) < 1e-13 * np.max(np.abs(V)):
            V = V_next
            break
        V = V_next
    np.testing.assert_allclose(P, V, rtol=1e-9)
    np.testing.assert_allclose(K, np.linalg.inv(R + B.T @ V @ B) @ B.T @ V @ A, rtol=1e-9)
    assert np.all(np.abs(np.linalg.eigvals(A - B @ K)) < 1)


def test_static_payload_residual_is_payload_gravity(model):
    """Holding still with exact gravity compensation leaves only the payload's gravity torque as residual."""
    env = rb.EnvironmentSpec(1.2, (0.03, 0.0))
    true = rb.apply_payload(model, env)
    q0 = np.array([0.3, -0.5, 0.4])
    T = 10
    time = np.arange(T + 1) * 0.02
    q = np.tile(q0, (T + 1, 1))
    tau = np.tile(rb.gravity_vector(true, q0), (T, 1))
    rec = sim.build_record(model, time, q, np.zeros_like(q), tau, env.id)
    expected = rb.gravity_vector(true, q0) - rb.gravity_vector(model, q0)
    np.testing.assert_allclose(rec.tau_residual[rec.valid], np.tile(expected, (rec.valid.sum(), 1)), atol=1e-12)
    assert not rec.valid[0] and rec.valid[1:].all()


def test_unloaded_collection_has_small_residual(desk):
    ds = sim.collect_dataset([rb.EnvironmentSpec(0.0, (0, 0), "zero")], 3, 4.0, 0, desk.collect)
    res = np.concatenate([r.tau_residual[r.valid] for r in ds.records])
    assert np.abs(res).max() <= 1e-2


def test_collection_is_deterministic(desk):
    envs = [rb.EnvironmentSpec(0.8, (0.05, -0.02), "a"), rb.EnvironmentSpec(1.6, (0.0, 0.1), "b")]
    a = sim.collect_dataset(envs, 2, 1.0, 3, desk.collect)
    b = sim.collect_dataset(envs, 2, 1.0, 3, desk.collect)
    c = sim.collect_dataset(envs, 2, 1.0, 4, desk.collect)
    assert a.manifest == b.manifest
    for ra, rb_ in zip(a.records, b.records):
        np.testing.assert_array_equal(ra.tau_residual, rb_.tau_residual)
    assert not np.array_equal(a.records[0].q, c.records[0].q)


def test_noise_statistics(rng):
    n, T = 3, 200_000
    zeros = np.zeros((T, n))
    rec = sim.TrajectoryRecord(np.arange(T) * 0.02, zeros + 0.5, zeros, zeros, zeros, zeros, "e")
    spec = sim.NoiseSpec([1e-3, 2e-3, 3e-3], [0.05, 0.05, 0.15], [1.5, 0.1, 0.2], [3.0, 0.6, 0.3])
    out = sim.inject_noise(rec, spec, rng)
    np.testing.assert_array_equal(out.q, rec.q)
    for got, var in ((out.dq, spec.var_dq), (out.ddq_fd, spec.var_ddq), (out.tau_applied, spec.var_tau),
                     (out.tau_residual, spec.var_tau_residual)):
        np.testing.assert_allclose(got.var(axis=0), var, rtol=0.02)
        assert np.all(np.abs(got.mean(axis=0)) < 5 * np.sqrt(var / T))


def test_window_torque_matches_central_difference():
    tau = np.array([[1.0], [3.0], [5.0]])
    np.testing.assert_allclose(sim.window_torque(tau), [[1.0], [2.0], [4.0]])
    ddq, valid = sim.finite_difference_acceleration(np.array([[0.0], [1.0], [4.0], [9.0]]), 0.5)
    np.testing.assert_allclose(ddq[1:-1, 0], [4.0, 8.0])
    assert valid.tolist() == [False, True, True, False]


def test_dataset_disk_round_trip(desk, tmp_path):
    ds = sim.collect_dataset([rb.EnvironmentSpec(0.5, (0, 0), "x")], 1, 0.5, 0, desk.collect)
    sim.save_dataset(ds, tmp_path)
    back = sim.load_dataset(tmp_path)
    assert back.manifest == ds.manifest
    np.testing.assert_array_equal(back.records[0].tau_residual, ds.records[0].tau_residual)
    np.testing.assert_array_equal(back.records[0].valid, ds.records[0].valid)
    header = (tmp_path / "records.csv").read_text().splitlines()[0].split(",")
    assert header == sim.csv_columns(3)


def test_tracking_controller_feedforward_on_reference(model, rng):
    q, dq, ddq = rng.normal(size=(3, 3))
    gains = sim.TrackingGains.from_lqr(3, 0.02, 100, 100, 0.05)
    tau = sim.tracking_controller(model, q, dq, q, dq, gains, ddq)
    np.testing.assert_allclose(tau, rb.inverse_dynamics(model, q, dq, ddq), atol=1e-12)
    clipped = sim.tracking_controller(model, q, dq, q, dq, gains, 1e3 * ddq, np.ones(3))
    assert np.all(np.abs(clipped) <= 1.0)
