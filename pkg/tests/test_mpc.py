import dataclasses
import itertools
import math

import numpy as np
import pytest

from cadelac import mpc
from cadelac import rigid_body as rb
from cadelac import sim
from cadelac.checkpoint import Checkpoint
from cadelac.config import ExperimentConfig
from cadelac.delan import DelanConfig, NetworkParams
from helpers import fd_jacobian, rel_err


def make_cfg(n=3, horizon=12, tau=100.0, **kw):
    return mpc.MpcConfig([1000.0] * n, [100.0] * n, [0.02] * n, [tau] * n, horizon=horizon, **kw)


class LinearDynamics:
    """ddq = M q + D dq + u, used for closed-form checks."""

    def __init__(self, M, D):
        self.M, self.D, self.n = M, D, M.shape[0]

    def forward(self, q, dq, tau):
        return q @ self.M.T + dq @ self.D.T + tau

    def inverse(self, q, dq, ddq):
        return ddq - q @ self.M.T - dq @ self.D.T


def test_rk4_linearization_of_linear_system(rng):
    n, h = 2, 0.05
    dyn = LinearDynamics(rng.normal(size=(n, n)), rng.normal(size=(n, n)))
    Ac = np.block([[np.zeros((n, n)), np.eye(n)], [dyn.M, dyn.D]])
    Bc = np.vstack([np.zeros((n, n)), np.eye(n)])
    Ad = sum(np.linalg.matrix_power(Ac * h, k) / math.factorial(k) for k in range(5))
    Bd = sum(np.linalg.matrix_power(Ac, k - 1) @ Bc * h ** k / math.factorial(k) for k in range(1, 5))
    x, u = rng.normal(size=2 * n), rng.normal(size=n)
    A, B, c, x_next = mpc.linearize_dynamics(mpc.state_rhs(dyn), x, u, h)
    np.testing.assert_allclose(A, Ad, atol=1e-13)
    np.testing.assert_allclose(B, Bd, atol=1e-13)
    np.testing.assert_allclose(c, 0.0, atol=1e-13)
    np.testing.assert_allclose(x_next, Ad @ x + Bd @ u, atol=1e-13)


@pytest.mark.parametrize("kind", ["nominal", "residual"])
def test_rk4_sensitivities_match_finite_differences(kind, model, rng):
    if kind == "nominal":
        dyn = mpc.NominalDynamics(model, rng.normal(size=3))
    else:
        dyn = mpc.ResidualDynamics(model, NetworkParams.init(3, DelanConfig(), rng), rng.normal(size=10))
    f = mpc.state_rhs(dyn)
    xs, us = rng.normal(size=(4, 6)), 5 * rng.normal(size=(4, 3))
    A, B, _, x_next = mpc.linearize_dynamics(f, xs, us, 0.02)
    for i in range(4):
        np.testing.assert_allclose(x_next[i], sim.rk4(f, xs[i], us[i], 0.02), atol=1e-13)
        assert rel_err(A[i], fd_jacobian(lambda v: sim.rk4(f, v, us[i], 0.02), xs[i])) < 1e-5
        assert rel_err(B[i], fd_jacobian(lambda v: sim.rk4(f, xs[i], v, 0.02), us[i])) < 1e-5


def brute_force_box_qp(Hm, g, lo, hi):
    """Enumerate every lower/upper/free assignment and keep the best feasible stationary point."""
    m = len(g)
    best, best_val = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=m):
        x = np.zeros(m)
        fixed = np.array([p != 2 for p in pattern])
        x[fixed] = [lo[i] if pattern[i] == 0 else hi[i] for i in range(m) if fixed[i]]
        free = ~fixed
        if free.any():
            x[free] = np.linalg.solve(Hm[np.ix_(free, free)], -(g[free] + Hm[np.ix_(free, fixed)] @ x[fixed]))
        if np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12):
            val = 0.5 * x @ Hm @ x + g @ x
            if val < best_val:
                best, best_val = x, val
    return best


def test_box_qp_matches_enumeration(rng):
    for _ in range(30):
        M = rng.normal(size=(3, 3))
        Hm = M @ M.T + 0.1 * np.eye(3)
        g = 3 * rng.normal(size=3)
        lo, hi = -rng.uniform(0.1, 1, 3), rng.uniform(0.1, 1, 3)
        x, _ = mpc.box_qp(Hm, g, lo, hi)
        np.testing.assert_allclose(x, brute_force_box_qp(Hm, g, lo, hi), atol=1e-9)


def double_integrator_problem(rng, N=10, n=2, dt=0.02):
    A1 = np.array([[1.0, dt], [0.0, 1.0]])
    B1 = np.array([[0.5 * dt * dt], [dt]])
    A = np.zeros((2 * n, 2 * n))
    B = np.zeros((2 * n, n))
    for j in range(n):  # state ordering [q, dq]
        idx = [j, n + j]
        A[np.ix_(idx, idx)] = A1
        B[idx, j] = B1[:, 0]
    As, Bs = np.repeat(A[None], N, 0), np.repeat(B[None], N, 0)
    d = 1e-3 * rng.normal(size=(N, 2 * n))
    Q = np.diag(rng.uniform(1, 100, 2 * n))
    R = np.diag(rng.uniform(0.01, 1, n))
    return As, Bs, d, Q, R, rng.normal(size=(N, 2 * n)), rng.normal(size=(N, n)), rng.normal(size=2 * n)


def dense_kkt(A, B, d, Q, R, qx, qu, dx0, QN, qN):
    N, nx, nu = A.shape[0], A.shape[1], B.shape[2]
    nz = (N + 1) * nx + N * nu
    xi = lambda i: slice(i * nx, (i + 1) * nx)
    ui = lambda i: slice((N + 1) * nx + i * nu, (N + 1) * nx + (i + 1) * nu)
    Hm, g = np.zeros((nz, nz)), np.zeros(nz)
    for i in range(N):
        Hm[xi(i), xi(i)], g[xi(i)] = Q, qx[i]
        Hm[ui(i), ui(i)], g[ui(i)] = R, qu[i]
    Hm[xi(N), xi(N)], g[xi(N)] = QN, qN
    rows = []
    rhs = []
    E = np.zeros((nx, nz))
    E[:, xi(0)] = np.eye(nx)
    rows.append(E)
    rhs.append(dx0)
    for i in range(N):
        E = np.zeros((nx, nz))
        E[:, xi(i + 1)] = np.eye(nx)
        E[:, xi(i)] = -A[i]
        E[:, ui(i)] = -B[i]
        rows.append(E)
        rhs.append(d[i])
    C = np.vstack(rows)
    K = np.block([[Hm, C.T], [C, np.zeros((C.shape[0], C.shape[0]))]])
    sol = np.linalg.solve(K, np.concatenate([-g, np.concatenate(rhs)]))
    z = sol[:nz]
    return z[:(N + 1) * nx].reshape(N + 1, nx), z[(N + 1) * nx:].reshape(N, nu)


def test_unconstrained_lq_matches_dense_kkt(rng):
    A, B, d, Q, R, qx, qu, dx0 = double_integrator_problem(rng)
    N, nu = B.shape[0], B.shape[2]
    big = np.full((N, nu), 1e9)
    qN = rng.normal(size=A.shape[1])
    dx, du, sat = mpc.riccati_box_lq(A, B, d, Q, R, qx, qu, -big, big, dx0, Q, qN)
    dx_ref, du_ref = dense_kkt(A, B, d, Q, R, qx, qu, dx0, Q, qN)
    assert not sat
    np.testing.assert_allclose(du, du_ref, atol=1e-8)
    np.testing.assert_allclose(dx, dx_ref, atol=1e-8)


def test_lq_feedback_matches_textbook_riccati(rng):
    """With zero linear terms the first control is -K_0 dx0 from the standard recursion."""
    A, B, d, Q, R, _, _, dx0 = double_integrator_problem(rng)
    N, nx, nu = B.shape[0], A.shape[1], B.shape[2]
    P = Q.copy()
    for i in range(N - 1, -1, -1):
        K = np.linalg.solve(R + B[i].T @ P @ B[i], B[i].T @ P @ A[i])
        P = Q + A[i].T @ P @ (A[i] - B[i] @ K)
    big = np.full((N, nu), 1e9)
    _, du, _ = mpc.riccati_box_lq(A, B, np.zeros_like(d), Q, R, np.zeros((N, nx)), np.zeros((N, nu)),
                                  -big, big, dx0, Q, np.zeros(nx))
    np.testing.assert_allclose(du[0], -K @ dx0, atol=1e-8)


def test_constrained_lq_respects_bounds(rng):
    A, B, d, Q, R, qx, qu, dx0 = double_integrator_problem(rng)
    N, nu = B.shape[0], B.shape[2]
    lo, hi = np.full((N, nu), -0.05), np.full((N, nu), 0.05)
    dx, du, sat = mpc.riccati_box_lq(A, B, d, Q, R, 100 * qx, 100 * qu, lo, hi, dx0, Q, np.zeros(A.shape[1]))
    assert sat and np.all(du >= lo) and np.all(du <= hi)
    for i in range(N):
        np.testing.assert_allclose(dx[i + 1], A[i] @ dx[i] + B[i] @ du[i] + d[i], atol=1e-12)


def hold_window(q, n, N):
    x_d = np.tile(np.concatenate([q, np.zeros(n)]), (N + 1, 1))
    return mpc.ReferenceWindow(x_d, np.zeros((N + 1, n)))


def regulate(cfg, ctrl, true_model, q_ref, x0, steps, substeps=20):
    n = true_model.n_links
    f = sim.state_derivative(true_model)
    x, tau_last, us = x0.copy(), None, []
    for k in range(steps):
        out = ctrl.control_step(mpc.Measurement(k * cfg.dt, x[:n], x[n:], tau_last), hold_window(q_ref, n, cfg.horizon))
        us.append(out.tau)
        for _ in range(substeps):
            x = sim.rk4(f, x, out.tau, cfg.dt / substeps)
        tau_last = out.tau
    return x, np.array(us)


def test_perfect_model_regulation(model):
    """Solver sanity: with the true model the loop settles to the set point within one second.

    Velocity and control weights are lowered so the short-horizon cost itself permits settling
    that fast; with the tracking weights the decay rate is capped near sqrt(q_weight / dq_weight).
    """
    true = rb.apply_payload(model, rb.EnvironmentSpec(1.5, (0.05, 0.05)))
    base = ExperimentConfig.builtin("desk").harness.mpc
    cfg = dataclasses.replace(base, dq_weight=np.full(3, 10.0), r_weight=0.1 * base.r_weight)
    ctrl = mpc.MpcController(cfg, model, "perfect", true_model=true)
    q_ref = np.array([0.4, 0.8, -0.6])
    x, us = regulate(cfg, ctrl, true, q_ref, np.concatenate([q_ref + [0.1, -0.1, 0.15], np.zeros(3)]), 50)
    assert np.max(np.abs(x[:3] - q_ref)) <= 1e-3
    assert np.all(us <= cfg.tau_max) and np.all(us >= cfg.tau_min)


def test_controls_stay_in_bounds_when_saturated(model):
    cfg = make_cfg(tau=20.0)
    ctrl = mpc.MpcController(cfg, model, "nominal")
    q_ref = np.array([1.0, -0.5, 0.5])
    _, us = regulate(cfg, ctrl, model, q_ref, np.zeros(6), 15)
    assert np.all(np.abs(us) <= 20.0)
    assert np.any(np.isclose(np.abs(us), 20.0))


def test_equilibrium_is_fixed_point(model):
    cfg = make_cfg()
    q = np.array([0.3, -0.2, 0.5])
    sol = mpc.solve_ocp(cfg, mpc.NominalDynamics(model), np.concatenate([q, np.zeros(3)]), hold_window(q, 3, 12))
    np.testing.assert_allclose(sol.u, np.tile(rb.gravity_vector(model, q), (12, 1)), atol=1e-8)
    assert sol.objective < 1e-12 and sol.status == "ok"


def test_feedforward_cost_and_absolute_cost_differ(model):
    q = np.array([0.3, -0.2, 0.5])
    x0 = np.concatenate([q, np.zeros(3)])
    ff = mpc.solve_ocp(make_cfg(), mpc.NominalDynamics(model), x0, hold_window(q, 3, 12))
    ab = mpc.solve_ocp(make_cfg(control_cost="absolute"), mpc.NominalDynamics(model), x0, hold_window(q, 3, 12))
    assert np.linalg.norm(ab.u[0]) < np.linalg.norm(ff.u[0])


def test_nonfinite_model_falls_back_to_nominal(model):
    class Broken(mpc.NominalDynamics):
        def forward(self, q, dq, tau):
            return super().forward(q, dq, tau) * np.nan

    q = np.zeros(3)
    x0 = np.concatenate([q, np.zeros(3)])
    sol = mpc.solve_ocp(make_cfg(), Broken(model), x0, hold_window(q, 3, 12), fallback=mpc.NominalDynamics(model))
    assert sol.status == "fallback" and np.all(np.isfinite(sol.u))
    with pytest.raises(FloatingPointError):
        mpc.solve_ocp(make_cfg(), Broken(model), x0, hold_window(q, 3, 12))


def test_overflowing_qp_step_falls_back_to_nominal(model):
    """A finite but enormous control sensitivity overflows the Riccati sweep, not the linearization."""
    class Stiff(mpc.NominalDynamics):
        def forward(self, q, dq, tau):
            return 1e160 * tau

    q = np.zeros(3)
    x0 = np.concatenate([q, np.zeros(3)])
    sol = mpc.solve_ocp(make_cfg(), Stiff(model), x0, hold_window(q, 3, 12), fallback=mpc.NominalDynamics(model))
    assert sol.status == "fallback" and np.all(np.isfinite(sol.u))


def test_inner_loop_and_robot_gravity_cancel(model, rng):
    gains = mpc.InnerLoopGains([10.0] * 3, [2.5] * 3)
    q, dq, qd, dqd, tau = rng.normal(size=(5, 3))
    cmd = mpc.inner_loop_torque(tau, qd, dqd, q, dq, gains, model, -np.ones(3), np.ones(3))
    applied = mpc.robot_joint_torque(cmd, q, model)
    np.testing.assert_allclose(applied, np.clip(tau + 10 * (qd - q) + 2.5 * (dqd - dq), -1, 1), atol=1e-12)


def test_context_history_matches_dataset_rows(model):
    """The online residual history reproduces the residual rows used for training."""
    desk = ExperimentConfig.builtin("desk")
    true = rb.apply_payload(model, rb.EnvironmentSpec(1.1, (0.04, 0.02)))
    chirp = sim.sample_chirp_params(np.random.default_rng(2), desk.collect.limits)
    times, qs, dqs, taus, _ = sim.rollout_tracking(desk.collect, [true], [chirp], 30)
    rec = sim.build_record(model, times, qs[0], dqs[0], taus[0], "e")
    est = mpc.ContextEstimator(Checkpoint.zeros(3, n_history=40), model, 0.02)
    for k in range(len(times)):
        est.observe(mpc.Measurement(times[k], qs[0, k], dqs[0, k], taus[0, k - 1] if k else None))
    hist = est.window.entries()
    rows = np.arange(1, 1 + len(hist))
    np.testing.assert_allclose(hist[:, 6:], rec.tau_residual[rows], atol=1e-9)
    np.testing.assert_allclose(hist[:, :3], rec.q[rows], atol=0)


def test_controller_validation(model):
    cfg = make_cfg()
    for kind, kw in (("cadelac", {}), ("ekf", {}), ("perfect", {}), ("bogus", {})):
        with pytest.raises(ValueError):
            mpc.MpcController(cfg, model, kind, **kw)
    with pytest.raises(ValueError):
        make_cfg(horizon=0)
    with pytest.raises(ValueError):
        make_cfg(control_cost="other")
